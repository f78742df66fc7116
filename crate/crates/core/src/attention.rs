//! Element-wise attention: a spatial gate computed from two feature maps
//! modulates one of them residually before a channel transform,
//! `X̂_e = (X_e ⊙ α + X_e) W_e`.

use candle_core::Tensor;

use crate::error::{ensure, Result};
use crate::nn::{resize_bilinear, Conv2d, InitScale, ParamBuilder};

#[derive(Debug, Clone)]
pub struct ElementAttention {
    /// 1×1 conv over `concat(guide, X_e)` producing the gate logits.
    pub gate: Conv2d,
    /// W_e, a bias-free 1×1 conv keeping the width of X_e.
    pub transform: Conv2d,
    guide_ch: usize,
    feat_ch: usize,
}

impl ElementAttention {
    pub fn new(b: &mut ParamBuilder, path: &str, guide_ch: usize, feat_ch: usize) -> Result<Self> {
        Ok(Self {
            gate: Conv2d::new(b, &format!("{path}.gate"), guide_ch + feat_ch, 1, 1, 1, true, InitScale::FanIn)?,
            transform: Conv2d::new(b, &format!("{path}.transform"), feat_ch, feat_ch, 1, 1, false, InitScale::FanIn)?,
            guide_ch,
            feat_ch,
        })
    }

    pub fn from_parts(gate: Conv2d, transform: Conv2d) -> Self {
        let feat_ch = transform.out_channels();
        let guide_ch = gate.weight.dims()[1] - feat_ch;
        Self {
            gate,
            transform,
            guide_ch,
            feat_ch,
        }
    }

    /// Bring both inputs to the finer of their two resolutions.
    fn align(&self, guide: &Tensor, x_e: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, cg, hg, wg) = guide.dims4()?;
        let (_, ce, he, we) = x_e.dims4()?;
        ensure!(
            cg == self.guide_ch && ce == self.feat_ch,
            "element attention expects ({}, {}) channels, got ({cg}, {ce})",
            self.guide_ch,
            self.feat_ch
        );
        let (h, w) = (hg.max(he), wg.max(we));
        Ok((resize_bilinear(guide, h, w)?, resize_bilinear(x_e, h, w)?))
    }

    /// Gate α in [0, 1], `(batch, 1, h, w)`, at the finer input resolution.
    pub fn attention_map(&self, guide: &Tensor, x_e: &Tensor) -> Result<Tensor> {
        let (g, e) = self.align(guide, x_e)?;
        self.gate_from_aligned(&g, &e)
    }

    fn gate_from_aligned(&self, guide: &Tensor, x_e: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[guide, x_e], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.gate.forward(&cat)?)?)
    }

    /// `(X_e ⊙ α + X_e) W_e` for a given gate.
    pub fn gate_and_transform(&self, x_e: &Tensor, alpha: &Tensor) -> Result<Tensor> {
        let gated = (x_e.broadcast_mul(alpha)? + x_e)?;
        self.transform.forward(&gated)
    }

    /// Fuse `x_e` under guidance of `guide`; the output has the channel
    /// width of `x_e` and the finer of the two resolutions.
    pub fn forward(&self, guide: &Tensor, x_e: &Tensor) -> Result<Tensor> {
        let (g, e) = self.align(guide, x_e)?;
        let alpha = self.gate_from_aligned(&g, &e)?;
        self.gate_and_transform(&e, &alpha)
    }
}
