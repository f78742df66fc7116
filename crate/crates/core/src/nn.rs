//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters are created through a [`ParamBuilder`] that draws every
//! initial value from one seeded ChaCha stream, so two builds from the same
//! config and seed are bit-identical. Trainable tensors live in a
//! [`ParamStore`] keyed by dotted path; non-trainable buffers (running
//! normalization statistics) sit beside them and are checkpointed too.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    fn all(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// SHA-256 over names, shapes and raw little-endian values of every
    /// parameter and buffer, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.all() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .all()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrite every parameter and buffer from a saved archive. The archive
    /// must hold exactly the same names and shapes.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let expected: Vec<&String> = self.all().map(|(k, _)| k).collect();
        let missing: Vec<&&String> = expected.iter().filter(|k| !loaded.contains_key(**k)).collect();
        let extra: Vec<&String> = loaded
            .keys()
            .filter(|k| self.get(k).is_none())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter set mismatch: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, var) in self.all() {
            let t = &loaded[name];
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: archive {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Seeded parameter factory.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, path: &str, values: Vec<f64>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let map = if buffer {
            &mut self.store.buffers
        } else {
            &mut self.store.params
        };
        if map.insert(path.to_string(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        Ok(out)
    }

    pub fn normal(&mut self, path: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(path, values, shape, false)
    }

    pub fn constant(&mut self, path: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(path, vec![value; n], shape, false)
    }

    pub fn buffer(&mut self, path: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(path, vec![value; n], shape, true)?;
        Ok(self.store.buffers[path].clone())
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Weight initialisation scale for a layer.
#[derive(Debug, Clone, Copy)]
pub enum InitScale {
    /// He fan-in, for layers feeding a ReLU.
    He,
    /// Unit-variance fan-in, for linear projections.
    FanIn,
}

impl InitScale {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            InitScale::He => (2.0 / fan_in as f64).sqrt(),
            InitScale::FanIn => (1.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: InitScale,
    ) -> Result<Self> {
        let std = init.std(in_ch * kernel * kernel);
        let weight = b.normal(&format!("{path}.weight"), &[out_ch, in_ch, kernel, kernel], std)?;
        let bias = if bias {
            Some(b.constant(&format!("{path}.bias"), &[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize) -> Self {
        let padding = weight.dims()[2] / 2;
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Dense map applied to the last axis of a `(batch, nodes, in)` tensor; the
/// node-matrix form of a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, path: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = b.normal(&format!("{path}.weight"), &[input, output], InitScale::FanIn.std(input))?;
        let bias = if bias {
            Some(b.constant(&format!("{path}.bias"), &[output], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(bias)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Batch,
    Group,
}

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const MAX_GROUPS: usize = 8;

#[derive(Debug, Clone)]
pub enum Norm {
    Batch {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Var,
        running_var: Var,
    },
    Group {
        gamma: Tensor,
        beta: Tensor,
        groups: usize,
    },
}

impl Norm {
    pub fn new(b: &mut ParamBuilder, path: &str, kind: NormKind, channels: usize) -> Result<Self> {
        let gamma = b.constant(&format!("{path}.gamma"), &[channels], 1.0)?;
        let beta = b.constant(&format!("{path}.beta"), &[channels], 0.0)?;
        Ok(match kind {
            NormKind::Batch => {
                let running_mean = b.buffer(&format!("{path}.running_mean"), &[channels], 0.0)?;
                let running_var = b.buffer(&format!("{path}.running_var"), &[channels], 1.0)?;
                Norm::Batch {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }
            }
            NormKind::Group => {
                let groups = (1..=MAX_GROUPS.min(channels))
                    .rev()
                    .find(|g| channels % g == 0)
                    .unwrap_or(1);
                Norm::Group { gamma, beta, groups }
            }
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        match self {
            Norm::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        if b * h * w < 2 {
                            return Err(Error::Validation(format!(
                                "batch norm needs more than one value per channel in training, got input {:?}",
                                x.dims()
                            )));
                        }
                        let xs = x.transpose(0, 1)?.flatten_from(1)?;
                        let mean = xs.mean_keepdim(1)?;
                        let var = xs.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
                        let n = (b * h * w) as f64;
                        let unbiased = (&var * (n / (n - 1.0)))?;
                        let new_mean = ((running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                            + (mean.flatten_all()?.detach() * BN_MOMENTUM)?)?;
                        let new_var = ((running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                            + (unbiased.flatten_all()?.detach() * BN_MOMENTUM)?)?;
                        running_mean.set(&new_mean)?;
                        running_var.set(&new_var)?;
                        (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
                    }
                    Mode::Eval => (
                        running_mean.as_tensor().reshape((1, c, 1, 1))?,
                        running_var.as_tensor().reshape((1, c, 1, 1))?,
                    ),
                };
                let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
                affine(&xn, gamma, beta)
            }
            Norm::Group { gamma, beta, groups } => {
                let xs = x.reshape((b, *groups, (c / groups) * h * w))?;
                let mean = xs.mean_keepdim(D::Minus1)?;
                let centered = xs.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                let xn = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?.reshape((b, c, h, w))?;
                affine(&xn, gamma, beta)
            }
        }
    }
}

fn affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&gamma.reshape((1, (), 1, 1))?)?
        .broadcast_add(&beta.reshape((1, (), 1, 1))?)?)
}

/// Interpolation matrix of shape `(output, input)` for 1-D bilinear
/// resampling with half-pixel centres (the `align_corners = false`
/// convention).
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of a `(batch, channels, h, w)` tensor, written as two
/// matrix products so it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx_t = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let flat = x.reshape((b * c, h, w))?;
    let cols = flat.broadcast_matmul(&rx_t)?;
    let rows = ry.broadcast_matmul(&cols)?;
    Ok(rows.reshape((b, c, out_h, out_w))?)
}
