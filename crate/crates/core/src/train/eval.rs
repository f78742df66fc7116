use std::path::{Path, PathBuf};

use crate::data::{EvalSource, Image};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, binarize, evaluate_masks, Averaging, MetricReport, BOUNDARY_THRESHOLDS};
use crate::model::{Model, ModelConfig, Prediction};

use super::checkpoint;

/// Anything that maps an image to per-pixel road probabilities.
pub trait RoadPredictor {
    fn predict(&self, image: &Image) -> Result<Prediction>;
}

impl RoadPredictor for Model {
    fn predict(&self, image: &Image) -> Result<Prediction> {
        Model::predict(self, image)
    }
}

/// Sliding-window wrapper around a model; border maps are not produced.
pub struct Tiled<'a> {
    pub model: &'a Model,
    pub tile: usize,
    pub stride: usize,
}

impl RoadPredictor for Tiled<'_> {
    fn predict(&self, image: &Image) -> Result<Prediction> {
        Ok(Prediction {
            road: self.model.predict_tiled(image, self.tile, self.stride)?,
            borders: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub averaging: Averaging,
    /// `(tile, stride)` for sliding-window inference.
    pub tile: Option<(usize, usize)>,
    /// Write a road/border overlay per image here.
    pub overlay_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub report: MetricReport,
    pub per_image: Vec<(String, MetricReport)>,
}

/// Score a predictor over every item of `source`.
pub fn evaluate_predictor(predictor: &dyn RoadPredictor, source: &dyn EvalSource, opts: &EvalOptions) -> Result<EvalResult> {
    if source.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    if let Some(dir) = &opts.overlay_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut per_image = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let item = source.item(i)?;
        let pred = predictor.predict(&item.image)?;
        let road = binarize(&pred.road);
        per_image.push((item.name.clone(), evaluate_masks(&road, &item.mask, &BOUNDARY_THRESHOLDS)?));
        if let Some(dir) = &opts.overlay_dir {
            let border = pred.borders.first().map(|(_, b)| binarize(b));
            crate::io::save_overlay(&item.image, &road, border.as_ref(), &dir.join(format!("{}.png", item.name)))?;
        }
    }
    let reports: Vec<MetricReport> = per_image.iter().map(|(_, r)| r.clone()).collect();
    Ok(EvalResult {
        report: aggregate(&reports, opts.averaging)?,
        per_image,
    })
}

/// Score a model, whole-image or tiled per `opts`.
pub fn evaluate(model: &Model, source: &dyn EvalSource, opts: &EvalOptions) -> Result<EvalResult> {
    match opts.tile {
        Some((tile, stride)) => evaluate_predictor(&Tiled { model, tile, stride }, source, opts),
        None => evaluate_predictor(model, source, opts),
    }
}

/// Load a checkpoint and score it. A mismatch between `expected` and the
/// stored model configuration is an error.
pub fn evaluate_checkpoint(
    dir: &Path,
    source: &dyn EvalSource,
    opts: &EvalOptions,
    expected: Option<&ModelConfig>,
) -> Result<EvalResult> {
    let (model, _) = checkpoint::load_model(dir, expected)?;
    evaluate(&model, source, opts)
}

/// Write a report as pretty JSON.
pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}
