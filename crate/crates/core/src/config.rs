//! Run configuration: TOML file with `[model]`, `[data]` and `[train]`
//! sections, dotted `key=value` overrides, and resolved snapshots.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mix_seed, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::metrics::Averaging;
use crate::model::{ModelConfig, Variant};

/// Environment variable supplying the default dataset root.
pub const DATA_ROOT_ENV: &str = "HNS_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn split_seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.seed,
            Split::Val => mix_seed(&[self.seed, 1]),
            Split::Test => mix_seed(&[self.seed, 2]),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with `train/`, `val/`, `test/` split directories.
    pub root: Option<PathBuf>,
    pub crop_size: usize,
    /// Sliding-window stride for evaluation; whole images when absent.
    pub tile_stride: Option<usize>,
    /// Generate splits in memory instead of reading `root`.
    pub synthetic: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            crop_size: 256,
            tile_stride: None,
            synthetic: None,
        }
    }
}

impl DataConfig {
    pub fn resolved_root(&self) -> Result<PathBuf> {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no data.root configured and {DATA_ROOT_ENV} is unset")))
    }

    pub fn spec(&self, split: Split, seed: u64) -> Result<DatasetSpec> {
        let mut spec = DatasetSpec::under_root(&self.resolved_root()?, split, self.crop_size, seed);
        spec.tile_stride = self.tile_stride;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_interval: u64,
    /// Stop after this many optimisation steps.
    pub max_steps: Option<u64>,
    pub averaging: Averaging,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            eval_interval: 1,
            max_steps: None,
            averaging: Averaging::Micro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(Variant::Full),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const PRESET_KEYS: [&str; 3] = ["gnn_levels", "enable_upper_stream", "enable_lower_stream"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("Adam moment coefficients must lie in [0, 1)".into()));
        }
        if self.data.crop_size == 0 || self.data.crop_size % crate::encoder::INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "data.crop_size {} must be a positive multiple of {}",
                self.data.crop_size,
                crate::encoder::INPUT_MULTIPLE
            )));
        }
        if self.model.norm == crate::nn::NormKind::Batch
            && t.batch_size == 1
            && self.data.crop_size == crate::encoder::INPUT_MULTIPLE
        {
            return Err(Error::Config(format!(
                "train.batch_size 1 with data.crop_size {} leaves batch norm one value per channel at the deepest level",
                self.data.crop_size
            )));
        }
        Ok(())
    }

    /// Parse TOML text, then apply `key=value` overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut touched_presets = false;
        let mut touched_variant = false;
        for ov in overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            let key = key.trim();
            touched_variant |= key == "model.variant";
            touched_presets |= PRESET_KEYS.iter().any(|k| key == format!("model.{k}"));
            set_dotted(&mut table, key, parse_value(value.trim()))?;
        }
        let model = table
            .entry("model")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config("[model] must be a table".into()))?;
        if touched_variant && !touched_presets {
            for k in PRESET_KEYS {
                model.remove(k);
            }
        }
        fill_model_defaults(model)?;
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Complete a partial `[model]` table from the defaults of its variant.
fn fill_model_defaults(model: &mut toml::Table) -> Result<()> {
    let variant: Variant = match model.get("variant") {
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::Config("model.variant must be a string".into()))?
            .parse()?,
        None => Variant::Full,
    };
    let defaults = toml::Table::try_from(ModelConfig::new(variant)).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in defaults {
        model.entry(k).or_insert(v);
    }
    Ok(())
}
