//! Python bindings for `hns_gnn`.
//!
//! Masks travel as nested lists of 0/1 integers, images as `[channel][row][col]`
//! float lists in `[0, 1]`. Reports come back as plain dicts.

use std::path::PathBuf;

use candle_core::DType;
use hns_gnn::config::{RunConfig, SynthConfig};
use hns_gnn::data::{self, Image, Mask, Split};
use hns_gnn::metrics::{self, BOUNDARY_THRESHOLDS};
use hns_gnn::model::{self, ModelConfig, Variant};
use hns_gnn::train::{self, checkpoint, EvalOptions};
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: hns_gnn::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_mask(rows: Vec<Vec<u8>>) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows must have equal length"));
    }
    Array2::from_shape_vec((h, w), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_array<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_image(planes: Vec<Vec<Vec<f32>>>) -> PyResult<Image> {
    let c = planes.len();
    let h = planes.first().map_or(0, Vec::len);
    let w = planes.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let flat: Vec<f32> = planes.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((c, h, w), flat).map_err(|_| PyValueError::new_err("image must be a [C][H][W] nested list"))
}

fn from_image(img: &Image) -> Vec<Vec<Vec<f32>>> {
    img.outer_iter().map(|p| from_array(&p.to_owned())).collect()
}

/// Serialize through JSON into Python objects.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(|e: hns_gnn::Error| PyValueError::new_err(e.to_string()))
}

/// Run configuration, built from TOML plus `key=value` overrides.
#[pyclass(name = "RunConfig", module = "hns_gnn_py")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_toml_with_overrides(toml, &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Reduced-width model trained on generated tiles.
    #[staticmethod]
    #[pyo3(signature = (variant = "full", train_count = 8, size = 64, seed = 0))]
    fn desk(variant: &str, train_count: usize, size: usize, seed: u64) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        inner.model = ModelConfig::desk(parse_variant(variant)?);
        inner.data.crop_size = size;
        inner.data.synthetic = Some(SynthConfig {
            train_count,
            val_count: train_count.div_ceil(4),
            test_count: train_count.div_ceil(4),
            size,
            seed,
        });
        inner.train.batch_size = train_count.min(4);
        inner.train.epochs = 1;
        inner.train.seed = seed;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.model.variant.name()
    }

    #[getter]
    fn checkpoint_dir(&self) -> PathBuf {
        self.inner.train.checkpoint_dir.clone()
    }

    #[setter]
    fn set_checkpoint_dir(&mut self, dir: PathBuf) {
        self.inner.train.checkpoint_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(variant={}, epochs={})", self.inner.model.variant, self.inner.train.epochs)
    }
}

/// A road extraction network.
#[pyclass(name = "Model", module = "hns_gnn_py", unsendable)]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model. `desk` selects the reduced-width preset.
    #[new]
    #[pyo3(signature = (variant = "full", desk = true, seed = 0))]
    fn new(variant: &str, desk: bool, seed: u64) -> PyResult<Self> {
        let v = parse_variant(variant)?;
        let cfg = if desk { ModelConfig::desk(v) } else { ModelConfig::new(v) };
        let inner = model::Model::build(&cfg, seed, DType::F32).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load_model(&checkpoint, None).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant.name()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().params().values().map(|v| v.as_tensor().elem_count()).sum()
    }

    #[getter]
    fn num_border_heads(&self) -> usize {
        self.inner.num_border_heads()
    }

    /// Returns `{"road": [[p]], "borders": {level: [[p]]}}` with probabilities.
    fn predict<'py>(&self, py: Python<'py>, image: Vec<Vec<Vec<f32>>>) -> PyResult<Bound<'py, PyDict>> {
        let image = to_image(image)?;
        let pred = self.inner.predict(&image).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("road", from_array(&pred.road))?;
        let borders = PyDict::new(py);
        for (level, map) in &pred.borders {
            borders.set_item(level, from_array(map))?;
        }
        out.set_item("borders", borders)?;
        Ok(out)
    }
}

#[pyfunction]
#[pyo3(signature = (mask, radius = 1))]
fn extract_border(mask: Vec<Vec<u8>>, radius: usize) -> PyResult<Vec<Vec<u8>>> {
    let b = data::extract_border(&to_mask(mask)?, radius).map_err(py_err)?;
    Ok(from_array(&b))
}

/// `(pos_weight, neg_weight)` for a binary target.
#[pyfunction]
fn balance_weights(mask: Vec<Vec<u8>>) -> PyResult<(f64, f64)> {
    let w = data::balance_weights(&to_mask(mask)?).map_err(py_err)?;
    Ok((w.pos, w.neg))
}

/// Region and boundary metrics for one binary prediction.
#[pyfunction]
fn evaluate_masks<'py>(py: Python<'py>, pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyAny>> {
    let report = metrics::evaluate_masks(&to_mask(pred)?, &to_mask(gt)?, &BOUNDARY_THRESHOLDS).map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn boundary_f(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>, threshold: u32) -> PyResult<f64> {
    metrics::boundary_f(&to_mask(pred)?, &to_mask(gt)?, threshold).map_err(py_err)
}

/// One synthetic `(image, mask)` tile.
#[pyfunction]
#[pyo3(signature = (size = 64, seed = 0))]
fn synth_tile(size: usize, seed: u64) -> PyResult<(Vec<Vec<Vec<f32>>>, Vec<Vec<u8>>)> {
    let (image, mask) = data::synth_tile(size, seed, data::DEFAULT_ROAD_WIDTH).map_err(py_err)?;
    Ok((from_image(&image), from_array(&mask)))
}

/// Train as configured and return the last checkpoint path and loss history.
#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn train_model<'py>(py: Python<'py>, config: &PyRunConfig, resume: bool) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let source = train::training_source(cfg).map_err(py_err)?;
    let val = if cfg.train.eval_interval > 0 {
        Some(train::eval_source(cfg, Split::Val).map_err(py_err)?)
    } else {
        None
    };
    let outcome = train::train(cfg, source.as_ref(), val.as_deref(), resume).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("last", outcome.last)?;
    out.set_item("best", outcome.best)?;
    out.set_item("steps", outcome.steps)?;
    out.set_item("losses", outcome.history.iter().map(|r| r.total).collect::<Vec<_>>())?;
    Ok(out)
}

/// Evaluate a checkpoint on a split of the data its configuration describes.
#[pyfunction]
#[pyo3(signature = (checkpoint, split = "test"))]
fn evaluate_checkpoint<'py>(py: Python<'py>, checkpoint: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
    let split: Split = split.parse().map_err(|e: hns_gnn::Error| PyValueError::new_err(e.to_string()))?;
    let manifest = checkpoint::read_manifest(&checkpoint).map_err(py_err)?;
    let source = train::eval_source(&manifest.config, split).map_err(py_err)?;
    let opts = EvalOptions {
        averaging: manifest.config.train.averaging,
        ..Default::default()
    };
    let result = train::evaluate_checkpoint(&checkpoint, source.as_ref(), &opts, Some(&manifest.config.model))
        .map_err(py_err)?;
    to_py(py, &result.report)
}

#[pymodule]
fn hns_gnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(extract_border, m)?)?;
    m.add_function(wrap_pyfunction!(balance_weights, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_masks, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_f, m)?)?;
    m.add_function(wrap_pyfunction!(synth_tile, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>())?;
    Ok(())
}
