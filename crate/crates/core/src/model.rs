//! Full network: encoder, per-level border heads and structure GNNs, and an
//! element-attention decoder, plus the ablation presets.
//!
//! Wiring, top-down from the stride-32 level:
//!
//! ```text
//! R4 = F4
//! Ri = EA(guide = Fi, X_e = D(i+1))          i = 3, 2, 1
//! Di = EA(guide = Ri, X_e = GNN(X_b, Ri))    if level i has a border head
//!      Ri                                     otherwise
//! y  = σ(upsample×4(conv1×1(D1)))
//! ```
//!
//! where `X_b` is the border feature of the level's border head.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::ElementAttention;
use crate::border_head::BorderHead;
use crate::data::{level_stride, Image};
use crate::encoder::{Encoder, INPUT_MULTIPLE};
use crate::error::{ensure, Error, Result};
use crate::nn::{resize_bilinear, Conv2d, InitScale, Mode, Norm, NormKind, ParamBuilder, ParamStore};
use crate::structure_gnn::{CoAttention, LatentGraph, StructureGnn};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Element-attention fusion only.
    #[serde(rename = "BU")]
    Bu,
    /// Border heads with the co-attention stream only.
    #[serde(rename = "SG")]
    Sg,
    /// One border + GNN module (deepest level).
    #[serde(rename = "E1")]
    E1,
    /// Two border + GNN modules.
    #[serde(rename = "E2")]
    E2,
    /// Three border + GNN modules.
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Bu, Variant::Sg, Variant::E1, Variant::E2, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bu => "BU",
            Variant::Sg => "SG",
            Variant::E1 => "E1",
            Variant::E2 => "E2",
            Variant::Full => "full",
        }
    }

    /// `(gnn_levels, upper stream, lower stream)` for this variant.
    pub fn preset(self) -> (Vec<usize>, bool, bool) {
        match self {
            Variant::Bu => (vec![], false, false),
            Variant::Sg => (vec![2, 3, 4], true, false),
            Variant::E1 => (vec![4], true, true),
            Variant::E2 => (vec![3, 4], true, true),
            Variant::Full => (vec![2, 3, 4], true, true),
        }
    }

    /// F1 (%) of each variant in the published ablation on Massachusetts
    /// roads; a reference only, not reproducible at desk scale.
    pub fn reference_f1(self) -> f64 {
        match self {
            Variant::Bu => 74.95,
            Variant::Sg => 75.67,
            Variant::E1 => 75.78,
            Variant::E2 => 76.89,
            Variant::Full => 76.96,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bu" => Ok(Variant::Bu),
            "sg" => Ok(Variant::Sg),
            "e1" => Ok(Variant::E1),
            "e2" => Ok(Variant::E2),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!("unknown variant '{s}' (expected BU, SG, E1, E2, full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder widths C1..C4 before division.
    pub widths: [usize; 4],
    pub width_divisor: usize,
    pub blocks_per_level: usize,
    pub norm: NormKind,
    /// Levels (subset of {2, 3, 4}) carrying a border head and a GNN.
    pub gnn_levels: Vec<usize>,
    pub enable_upper_stream: bool,
    pub enable_lower_stream: bool,
    /// Query/key dimension d of the co-attention.
    pub attn_dim: usize,
    /// D1, number of latent graph nodes.
    pub latent_nodes: usize,
    /// D2, latent node dimension.
    pub latent_dim: usize,
    /// C_b, border feature width.
    pub border_width: usize,
    /// Normalise the latent projection by the pixel count.
    pub latent_mean_pool: bool,
    /// Weight of the border consistency terms.
    pub lambda: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        let (gnn_levels, up, low) = variant.preset();
        Self {
            variant,
            widths: [64, 128, 256, 512],
            width_divisor: 1,
            blocks_per_level: 2,
            norm: NormKind::Batch,
            gnn_levels,
            enable_upper_stream: up,
            enable_lower_stream: low,
            attn_dim: 64,
            latent_nodes: 64,
            latent_dim: 64,
            border_width: 64,
            latent_mean_pool: true,
            lambda: 1.0,
        }
    }

    /// Reduced-width configuration that trains on a CPU in minutes.
    pub fn desk(variant: Variant) -> Self {
        Self {
            width_divisor: 8,
            attn_dim: 16,
            latent_nodes: 16,
            latent_dim: 16,
            border_width: 16,
            ..Self::new(variant)
        }
    }

    /// Switch variant and reset the preset-controlled fields.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (levels, up, low) = variant.preset();
        self.variant = variant;
        self.gnn_levels = levels;
        self.enable_upper_stream = up;
        self.enable_lower_stream = low;
        self
    }

    pub fn effective_widths(&self) -> [usize; 4] {
        self.widths.map(|w| (w / self.width_divisor.max(1)).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let (levels, up, low) = self.variant.preset();
        let mut conflicts = Vec::new();
        if self.gnn_levels != levels {
            conflicts.push(format!("gnn_levels {:?} (preset {:?})", self.gnn_levels, levels));
        }
        if self.enable_upper_stream != up {
            conflicts.push(format!("enable_upper_stream {} (preset {up})", self.enable_upper_stream));
        }
        if self.enable_lower_stream != low {
            conflicts.push(format!("enable_lower_stream {} (preset {low})", self.enable_lower_stream));
        }
        if !conflicts.is_empty() {
            return Err(Error::Config(format!(
                "variant {} conflicts with {}",
                self.variant,
                conflicts.join(", ")
            )));
        }
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be >= 1".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.widths.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::Config(format!("widths {:?} must be positive and nondecreasing", self.widths)));
        }
        for (name, v) in [
            ("attn_dim", self.attn_dim),
            ("latent_nodes", self.latent_nodes),
            ("latent_dim", self.latent_dim),
            ("border_width", self.border_width),
            ("blocks_per_level", self.blocks_per_level),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Border probability at one hierarchy level.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub level: usize,
    /// `(batch, 1, H / stride, W / stride)`.
    pub prob: Tensor,
}

#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// Road probability `(batch, 1, H, W)`.
    pub road: Tensor,
    /// One entry per enabled level, ascending.
    pub borders: Vec<LevelPrediction>,
}

/// Per-image prediction as plain arrays.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub road: Array2<f32>,
    pub borders: Vec<(usize, Array2<f32>)>,
}

#[derive(Debug)]
struct GnnLevel {
    head: BorderHead,
    gnn: StructureGnn,
    /// Applied to the reasoned map before fusion.
    gnn_norm: Norm,
    fusion: ElementAttention,
    fusion_norm: Norm,
}

/// Element attention followed by normalisation.
#[derive(Debug)]
struct FuseBlock {
    attention: ElementAttention,
    norm: Norm,
}

impl FuseBlock {
    fn new(b: &mut ParamBuilder, path: &str, guide_ch: usize, feat_ch: usize, kind: NormKind) -> Result<Self> {
        Ok(Self {
            attention: ElementAttention::new(b, path, guide_ch, feat_ch)?,
            norm: Norm::new(b, &format!("{path}.norm"), kind, feat_ch)?,
        })
    }

    fn forward(&self, guide: &Tensor, x_e: &Tensor, mode: Mode) -> Result<Tensor> {
        self.norm.forward(&self.attention.forward(guide, x_e)?, mode)
    }
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    dtype: DType,
    encoder: Encoder,
    decoder: BTreeMap<usize, FuseBlock>,
    levels: BTreeMap<usize, GnnLevel>,
    head: Conv2d,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let widths = config.effective_widths();
        let top = widths[3];
        let mut b = ParamBuilder::new(seed, dtype);
        let encoder = Encoder::new(&mut b, "encoder", widths, config.blocks_per_level, config.norm)?;
        let mut decoder = BTreeMap::new();
        for level in (1..=3).rev() {
            decoder.insert(
                level,
                FuseBlock::new(&mut b, &format!("decoder.level{level}"), widths[level - 1], top, config.norm)?,
            );
        }
        let mut levels = BTreeMap::new();
        for &level in &config.gnn_levels {
            let p = format!("gnn.level{level}");
            let head = BorderHead::new(&mut b, &format!("{p}.border"), top, config.border_width)?;
            let upper = if config.enable_upper_stream {
                Some(CoAttention::new(&mut b, &format!("{p}.upper"), config.border_width, top, config.attn_dim, top)?)
            } else {
                None
            };
            let lower = if config.enable_lower_stream {
                Some(LatentGraph::new(
                    &mut b,
                    &format!("{p}.lower"),
                    config.border_width,
                    top,
                    config.latent_nodes,
                    config.latent_dim,
                    top,
                    config.latent_mean_pool,
                )?)
            } else {
                None
            };
            let gnn_norm = Norm::new(&mut b, &format!("{p}.gnn_norm"), config.norm, top)?;
            let fusion = ElementAttention::new(&mut b, &format!("{p}.fusion"), top, top)?;
            let fusion_norm = Norm::new(&mut b, &format!("{p}.fusion.norm"), config.norm, top)?;
            levels.insert(
                level,
                GnnLevel {
                    head,
                    gnn: StructureGnn { upper, lower },
                    gnn_norm,
                    fusion,
                    fusion_norm,
                },
            );
        }
        let head = Conv2d::new(&mut b, "head", top, 1, 1, 1, true, InitScale::FanIn)?;
        Ok(Self {
            config: config.clone(),
            store: b.finish(),
            dtype,
            encoder,
            decoder,
            levels,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_border_heads(&self) -> usize {
        self.levels.len()
    }

    pub fn num_gnn_modules(&self) -> usize {
        self.levels.len()
    }

    /// Forward a `(batch, 3, H, W)` tensor.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<PredictionBundle> {
        let (_, _, h, w) = images.dims4()?;
        let feats = self.encoder.encode(images, mode)?;
        let mut borders = Vec::new();
        let mut deeper: Option<Tensor> = None;
        for level in (1..=4).rev() {
            let road = match (&deeper, self.decoder.get(&level)) {
                (Some(d), Some(block)) => block.forward(feats.level(level), d, mode)?,
                _ => feats.level(level).clone(),
            };
            let out = match self.levels.get(&level) {
                Some(gl) => {
                    let border = gl.head.detect_border(&road)?;
                    let reasoned = gl.gnn_norm.forward(&gl.gnn.forward(&border.feature, &road)?, mode)?;
                    borders.push(LevelPrediction {
                        level,
                        prob: border.prob,
                    });
                    gl.fusion_norm.forward(&gl.fusion.forward(&road, &reasoned)?, mode)?
                }
                None => road,
            };
            deeper = Some(out);
        }
        let logits = self.head.forward(&deeper.expect("four levels"))?;
        let road = candle_nn::ops::sigmoid(&resize_bilinear(&logits, h, w)?)?;
        borders.sort_by_key(|b| b.level);
        Ok(PredictionBundle { road, borders })
    }

    /// Eval-mode prediction for one image of any size. The image is
    /// edge-padded to a multiple of 32 and the outputs cropped back.
    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let (c, h, w) = image.dim();
        ensure!(c == 3 && h > 0 && w > 0, "expected a non-empty 3-channel image");
        let ph = h.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
        let pw = w.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
        let padded = Array3::from_shape_fn((3, ph, pw), |(c, y, x)| image[[c, y.min(h - 1), x.min(w - 1)]]);
        let t = image_tensor(&padded, self.dtype)?;
        let bundle = self.forward(&t, Mode::Eval)?;
        let road = tensor_to_map(&bundle.road)?.slice(s![..h, ..w]).to_owned();
        let borders = bundle
            .borders
            .iter()
            .map(|lp| {
                let s = level_stride(lp.level);
                let m = tensor_to_map(&lp.prob)?;
                Ok((lp.level, m.slice(s![..h.div_ceil(s), ..w.div_ceil(s)]).to_owned()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction { road, borders })
    }

    /// Sliding-window road prediction: `tile × tile` windows every `stride`
    /// pixels, overlapping probabilities averaged.
    pub fn predict_tiled(&self, image: &Image, tile: usize, stride: usize) -> Result<Array2<f32>> {
        let (_, h, w) = image.dim();
        ensure!(stride > 0 && tile > 0, "tile and stride must be positive");
        if h <= tile && w <= tile {
            return Ok(self.predict(image)?.road);
        }
        let starts = |len: usize| -> Vec<usize> {
            if len <= tile {
                return vec![0];
            }
            let mut v: Vec<usize> = (0..=len - tile).step_by(stride).collect();
            if *v.last().unwrap() != len - tile {
                v.push(len - tile);
            }
            v
        };
        let mut acc = Array2::<f32>::zeros((h, w));
        let mut count = Array2::<f32>::zeros((h, w));
        for &y in &starts(h) {
            for &x in &starts(w) {
                let (th, tw) = (tile.min(h), tile.min(w));
                let window = image.slice(s![.., y..y + th, x..x + tw]).to_owned();
                let p = self.predict(&window)?.road;
                acc.slice_mut(s![y..y + th, x..x + tw]).zip_mut_with(&p, |a, &v| *a += v);
                count.slice_mut(s![y..y + th, x..x + tw]).mapv_inplace(|c| c + 1.0);
            }
        }
        Ok(acc / count)
    }
}

/// Stack images into a `(batch, 3, H, W)` tensor.
pub fn batch_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    ensure!(!images.is_empty(), "empty batch");
    let dim = images[0].dim();
    ensure!(images.iter().all(|i| i.dim() == dim), "images in a batch must share dims");
    let mut data = Vec::with_capacity(images.len() * dim.0 * dim.1 * dim.2);
    for img in images {
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), dim.0, dim.1, dim.2), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn image_tensor(image: &Image, dtype: DType) -> Result<Tensor> {
    batch_tensor(&[image], dtype)
}

/// First map of a `(batch, 1, h, w)` tensor.
pub fn tensor_to_map(t: &Tensor) -> Result<Array2<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let v = t.get(0)?.get(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), v).map_err(|e| Error::Validation(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_define_module_counts() {
        let bu = Model::build(&ModelConfig::desk(Variant::Bu), 0, DType::F32).unwrap();
        assert_eq!((bu.num_border_heads(), bu.num_gnn_modules()), (0, 0));
        let full = Model::build(&ModelConfig::desk(Variant::Full), 0, DType::F32).unwrap();
        assert_eq!((full.num_border_heads(), full.num_gnn_modules()), (3, 3));
        assert!(full.params().params().contains_key("gnn.level2.lower.adjacency"));
        let sg = Model::build(&ModelConfig::desk(Variant::Sg), 0, DType::F32).unwrap();
        assert!(!sg.params().params().keys().any(|k| k.contains(".lower.")));
    }

    #[test]
    fn conflicting_fields_name_the_conflict() {
        let mut cfg = ModelConfig::desk(Variant::Bu);
        cfg.gnn_levels = vec![4];
        let err = Model::build(&cfg, 0, DType::F32).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("gnn_levels")), "{err}");
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let a = Model::build(&ModelConfig::desk(Variant::E2), 1, DType::F32).unwrap();
        let b = Model::build(&ModelConfig::desk(Variant::E2), 2, DType::F32).unwrap();
        assert_eq!(a.params().num_params(), b.params().num_params());
        let c = Model::build(&ModelConfig::desk(Variant::Full), 1, DType::F32).unwrap();
        assert!(c.params().num_params() > a.params().num_params());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::Full);
        assert_eq!("bu".parse::<Variant>().unwrap(), Variant::Bu);
        assert!("E3".parse::<Variant>().is_err());
    }

    #[test]
    fn predict_handles_unaligned_sizes() {
        let m = Model::build(&ModelConfig::desk(Variant::E1), 0, DType::F32).unwrap();
        let img = Image::from_elem((3, 70, 45), 0.5);
        let p = m.predict(&img).unwrap();
        assert_eq!(p.road.dim(), (70, 45));
        assert_eq!(p.borders.len(), 1);
        assert_eq!(p.borders[0].1.dim(), (3, 2));
        let tiled = m.predict_tiled(&img, 32, 16).unwrap();
        assert_eq!(tiled.dim(), (70, 45));
    }
}
