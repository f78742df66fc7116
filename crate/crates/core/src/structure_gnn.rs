//! Road-structure-aware graph reasoning over border and road features.
//!
//! Two streams share the flattened node matrices `X_b` (border feature,
//! `N × C_b`) and `X_r` (road feature, `N × C_r`), with `N = h · w`:
//!
//! * the upper stream is a co-attention: similarities are computed between
//!   border queries and border keys, and the resulting row-stochastic matrix
//!   averages road values, giving every node its soft nearest neighbour in
//!   border space expressed in road-feature space;
//! * the lower stream projects the nodes onto `D1` latent nodes of
//!   dimension `D2` (`X_f = φ(X_b)ᵀ ψ(X_r)`), applies a graph convolution
//!   with the Laplacian-smoothing operator `I − A_G` over a learned
//!   adjacency, and reprojects onto the pixels.
//!
//! The latent graph has a fixed size whatever the spatial extent of the
//! input. All linear maps act on the channel axis, i.e. they are 1×1
//! convolutions on the spatial maps.

use candle_core::{Tensor, D};

use crate::error::{ensure, Error, Result};
use crate::nn::{Linear, ParamBuilder};

/// Standard deviation of the initial adjacency entries.
pub const ADJACENCY_INIT_STD: f64 = 0.01;

/// `(batch, C, h, w)` → `(batch, h·w, C)`.
pub fn flatten_nodes(map: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    Ok(map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(batch, h·w, C)` → `(batch, C, h, w)`.
pub fn unflatten_nodes(nodes: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = nodes.dims3()?;
    ensure!(n == h * w, "node count {n} does not match {h}x{w}");
    Ok(nodes.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct CoAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl CoAttention {
    pub fn new(b: &mut ParamBuilder, path: &str, border_ch: usize, road_ch: usize, attn_dim: usize, value_dim: usize) -> Result<Self> {
        if attn_dim == 0 || value_dim == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        Ok(Self {
            query: Linear::new(b, &format!("{path}.query"), border_ch, attn_dim, false)?,
            key: Linear::new(b, &format!("{path}.key"), border_ch, attn_dim, false)?,
            value: Linear::new(b, &format!("{path}.value"), road_ch, value_dim, false)?,
        })
    }

    /// Row-stochastic `(batch, N, N)` attention of border queries over
    /// border keys, scaled by `1/√d`.
    pub fn weights(&self, x_b: &Tensor) -> Result<Tensor> {
        let (_, n, _) = x_b.dims3()?;
        ensure!(n > 0, "co-attention needs at least one node");
        let q = self.query.forward(x_b)?;
        let k = self.key.forward(x_b)?;
        let d = q.dim(D::Minus1)? as f64;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / d.sqrt())?;
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    /// Co-attention embedding, `(batch, N, C_v)`.
    pub fn forward(&self, x_b: &Tensor, x_r: &Tensor) -> Result<Tensor> {
        let (bb, nb, _) = x_b.dims3()?;
        let (br, nr, _) = x_r.dims3()?;
        ensure!(bb == br && nb == nr, "X_b has {nb} nodes, X_r has {nr}");
        let attn = self.weights(x_b)?;
        let v = self.value.forward(x_r)?;
        Ok(attn.matmul(&v)?)
    }
}

#[derive(Debug, Clone)]
pub struct LatentGraph {
    /// φ: border channels → D1.
    pub border_proj: Linear,
    /// ψ: road channels → D2.
    pub road_proj: Linear,
    /// Pixel coefficients over the D1 latent nodes, used to map back.
    pub reproject: Linear,
    /// A_G, `D1 × D1`.
    pub adjacency: Tensor,
    /// W_r, `D2 × D2`.
    pub weight: Tensor,
    /// D2 → C_v channel transform applied after reprojection.
    pub output: Linear,
    /// Divide the projection by the node count so the latent features do
    /// not scale with image area.
    pub mean_pool: bool,
}

impl LatentGraph {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        path: &str,
        border_ch: usize,
        road_ch: usize,
        latent_nodes: usize,
        latent_dim: usize,
        value_dim: usize,
        mean_pool: bool,
    ) -> Result<Self> {
        if latent_nodes == 0 || latent_dim == 0 {
            return Err(Error::Config(format!(
                "latent graph dims must be positive, got D1={latent_nodes}, D2={latent_dim}"
            )));
        }
        Ok(Self {
            border_proj: Linear::new(b, &format!("{path}.phi"), border_ch, latent_nodes, false)?,
            road_proj: Linear::new(b, &format!("{path}.psi"), road_ch, latent_dim, false)?,
            reproject: Linear::new(b, &format!("{path}.reproject"), road_ch, latent_nodes, false)?,
            adjacency: b.normal(&format!("{path}.adjacency"), &[latent_nodes, latent_nodes], ADJACENCY_INIT_STD)?,
            weight: b.normal(
                &format!("{path}.graph_weight"),
                &[latent_dim, latent_dim],
                (1.0 / latent_dim as f64).sqrt(),
            )?,
            output: Linear::new(b, &format!("{path}.output"), latent_dim, value_dim, true)?,
            mean_pool,
        })
    }

    /// `X_f = φ(X_b)ᵀ ψ(X_r)`, `(batch, D1, D2)`.
    pub fn project(&self, x_b: &Tensor, x_r: &Tensor) -> Result<Tensor> {
        let (_, n, _) = x_b.dims3()?;
        ensure!(n > 0, "latent projection needs at least one node");
        let phi = self.border_proj.forward(x_b)?;
        let psi = self.road_proj.forward(x_r)?;
        let x_f = phi.transpose(1, 2)?.contiguous()?.matmul(&psi)?;
        if self.mean_pool {
            Ok((x_f / n as f64)?)
        } else {
            Ok(x_f)
        }
    }

    /// Graph convolution `X_l = (I − A_G) X_f W_r`.
    pub fn reason(&self, x_f: &Tensor) -> Result<Tensor> {
        let smoothed = (x_f - self.adjacency.broadcast_matmul(x_f)?)?;
        Ok(smoothed.broadcast_matmul(&self.weight)?)
    }

    /// Lower-stream output, `(batch, N, C_v)`.
    pub fn forward(&self, x_b: &Tensor, x_r: &Tensor) -> Result<Tensor> {
        let (bb, nb, _) = x_b.dims3()?;
        let (br, nr, _) = x_r.dims3()?;
        ensure!(bb == br && nb == nr, "X_b has {nb} nodes, X_r has {nr}");
        let x_l = self.reason(&self.project(x_b, x_r)?)?;
        let coeffs = self.reproject.forward(x_r)?;
        self.output.forward(&coeffs.matmul(&x_l)?)
    }
}

/// Point-wise sum of the two streams, reshaped to a `(batch, C_v, h, w)` map.
pub fn fuse_streams(upper: &Tensor, lower: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    ensure!(
        upper.dims() == lower.dims(),
        "stream shapes differ: {:?} vs {:?}",
        upper.dims(),
        lower.dims()
    );
    unflatten_nodes(&(upper + lower)?, h, w)
}

/// Both streams for one hierarchy level; either may be disabled.
#[derive(Debug, Clone)]
pub struct StructureGnn {
    pub upper: Option<CoAttention>,
    pub lower: Option<LatentGraph>,
}

impl StructureGnn {
    /// `x_b`: border feature map, `x_r`: road feature map, both
    /// `(batch, C, h, w)` with equal spatial dims.
    pub fn forward(&self, x_b: &Tensor, x_r: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x_r.dims4()?;
        let (_, _, hb, wb) = x_b.dims4()?;
        ensure!((h, w) == (hb, wb), "border map {hb}x{wb} vs road map {h}x{w}");
        let nb = flatten_nodes(x_b)?;
        let nr = flatten_nodes(x_r)?;
        let upper = self.upper.as_ref().map(|s| s.forward(&nb, &nr)).transpose()?;
        let lower = self.lower.as_ref().map(|s| s.forward(&nb, &nr)).transpose()?;
        match (upper, lower) {
            (Some(u), Some(l)) => fuse_streams(&u, &l, h, w),
            (Some(s), None) | (None, Some(s)) => unflatten_nodes(&s, h, w),
            (None, None) => Err(Error::Config("structure GNN with both streams disabled".into())),
        }
    }
}
