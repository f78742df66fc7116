use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{EvalSource, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, BOUNDARY_THRESHOLDS};
use crate::model::Variant;

use super::eval::{evaluate, EvalOptions};
use super::train;

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Option<MetricReport>,
    pub final_loss: Option<f64>,
    pub steps: u64,
    /// Published F1 (%) of this configuration on Massachusetts Roads.
    pub reference_f1: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// True when a variant failed and later variants were not run.
    pub partial: bool,
}

/// Train and evaluate each variant under otherwise identical settings.
/// Each variant checkpoints under `<checkpoint_dir>/<variant>`. The table is
/// written to `out_dir/ablation.{csv,json}` even when a variant fails, in
/// which case the failure is returned after writing.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    source: &dyn SampleSource,
    validation: &dyn EvalSource,
    out_dir: &Path,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let mut table = AblationTable {
        rows: Vec::new(),
        partial: false,
    };
    let mut failure = None;
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.model = cfg.model.with_variant(variant);
        cfg.train.checkpoint_dir = base.train.checkpoint_dir.join(variant.name());
        let run = || -> Result<(MetricReport, Option<f64>, u64)> {
            let outcome = train(&cfg, source, None, false)?;
            let (model, _) = super::checkpoint::load_model(&outcome.last, Some(&cfg.model))?;
            let opts = EvalOptions {
                averaging: cfg.train.averaging,
                tile: cfg.data.tile_stride.map(|s| (cfg.data.crop_size, s)),
                overlay_dir: None,
            };
            let result = evaluate(&model, validation, &opts)?;
            Ok((result.report, outcome.history.last().map(|r| r.total), outcome.steps))
        };
        match run() {
            Ok((metrics, final_loss, steps)) => table.rows.push(AblationRow {
                variant,
                metrics: Some(metrics),
                final_loss,
                steps,
                reference_f1: variant.reference_f1(),
                error: None,
            }),
            Err(e) => {
                table.rows.push(AblationRow {
                    variant,
                    metrics: None,
                    final_loss: None,
                    steps: 0,
                    reference_f1: variant.reference_f1(),
                    error: Some(e.to_string()),
                });
                table.partial = true;
                failure = Some(e);
                break;
            }
        }
    }
    write_table(&table, out_dir)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(table),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_table(table: &AblationTable, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_vec_pretty(table)?).map_err(|e| Error::io(&json, e))?;

    let path = out_dir.join("ablation.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = ["variant", "iou", "precision", "recall", "f1"].map(String::from).to_vec();
    header.extend(BOUNDARY_THRESHOLDS.iter().map(|t| format!("boundary_f_{t}")));
    header.extend(["final_loss", "steps", "reference_f1", "status"].map(String::from));
    w.write_record(&header)?;
    for row in &table.rows {
        let m = row.metrics.as_ref();
        let mut rec = vec![
            row.variant.name().to_string(),
            opt(m.map(|m| m.iou)),
            opt(m.map(|m| m.precision)),
            opt(m.map(|m| m.recall)),
            opt(m.map(|m| m.f1)),
        ];
        rec.extend(BOUNDARY_THRESHOLDS.iter().map(|t| opt(m.and_then(|m| m.boundary_f.get(t).copied()))));
        rec.push(opt(row.final_loss));
        rec.push(row.steps.to_string());
        rec.push(row.reference_f1.to_string());
        rec.push(match &row.error {
            Some(e) => format!("failed: {e}"),
            None => "ok".into(),
        });
        w.write_record(&rec)?;
    }
    let mut file = w.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
    let mut footer = String::from("# published F1 (%) on Massachusetts Roads:");
    for v in Variant::ALL {
        footer.push_str(&format!(" {}={}", v.name(), v.reference_f1()));
    }
    if table.partial {
        footer.push_str("\n# PARTIAL: a variant failed and the remaining variants were skipped");
    }
    writeln!(file, "{footer}").map_err(|e| Error::io(&path, e))
}
