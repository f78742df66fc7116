//! Checkpoint directories: `params.safetensors`, `optimizer.safetensors`
//! and a `manifest.json` describing the run.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Model, ModelConfig};

use super::optim::Adam;

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    /// Optimisation steps completed.
    pub step: u64,
    pub seed: u64,
    pub param_checksum: String,
    /// Validation metrics at this step, if computed.
    pub metrics: Option<MetricReport>,
}

/// Write a checkpoint, replacing `dir` only once the new one is complete.
pub fn save(dir: &Path, model: &Model, optimizer: &Adam, config: &RunConfig, metrics: Option<MetricReport>) -> Result<()> {
    let staging = staging_path(dir);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    model.params().save(&staging.join(PARAMS_FILE))?;
    optimizer.save(&staging.join(OPTIMIZER_FILE))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        config_hash: config.hash()?,
        step: optimizer.step_count(),
        seed: config.train.seed,
        param_checksum: model.params().checksum()?,
        metrics,
    };
    let path = staging.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Rebuild the model recorded in a checkpoint. When `expected` is given the
/// stored model configuration must match it exactly.
pub fn load_model(dir: &Path, expected: Option<&ModelConfig>) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(expected) = expected {
        if expected != &manifest.config.model {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} was trained with a different model configuration (variant {} vs requested {})",
                dir.display(),
                manifest.config.model.variant,
                expected.variant
            )));
        }
    }
    let model = Model::build(&manifest.config.model, manifest.seed, DType::F32)?;
    model.params().load(&dir.join(PARAMS_FILE))?;
    let checksum = model.params().checksum()?;
    if checksum != manifest.param_checksum {
        return Err(Error::Checkpoint(format!("parameter checksum mismatch in {}", dir.display())));
    }
    Ok((model, manifest))
}
