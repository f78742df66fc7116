//! Joint objective: class-balanced BCE on the road map and every border
//! level, plus the per-level border consistency term.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{BalanceWeights, Mask, RoadSample};
use crate::error::{ensure, Error, Result};
use crate::model::PredictionBundle;

/// Probability clamp used inside the logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Border probabilities at or above this count as border pixels.
pub const BORDER_THRESHOLD: f64 = 0.5;

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("{what} contains non-finite values"),
        });
    }
    Ok(())
}

fn weight_column(weights: &[BalanceWeights], pick: fn(&BalanceWeights) -> f64, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = weights.iter().map(pick).collect();
    Ok(Tensor::from_vec(v, (weights.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean over all pixels of
/// `−[w⁺·t·log p + w⁻·(1−t)·log(1−p)]`, with `p` clamped to `[ε, 1−ε]`.
/// `pred` and `target` are `(batch, 1, h, w)`; one weight pair per sample.
pub fn balanced_bce(pred: &Tensor, target: &Tensor, weights: &[BalanceWeights]) -> Result<Tensor> {
    ensure!(
        pred.dims() == target.dims(),
        "prediction {:?} and target {:?} differ in shape",
        pred.dims(),
        target.dims()
    );
    let (b, _, _, _) = pred.dims4()?;
    ensure!(weights.len() == b, "{} weight pairs for batch of {b}", weights.len());
    check_finite(pred, "prediction")?;
    let dtype = pred.dtype();
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = weight_column(weights, |w| w.pos, dtype)?;
    let neg = weight_column(weights, |w| w.neg, dtype)?;
    let pos_term = (target * p.log()?)?.broadcast_mul(&pos)?;
    let neg_term = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?.broadcast_mul(&neg)?;
    Ok((pos_term + neg_term)?.mean_all()?.affine(-1.0, 0.0)?)
}

/// Neighbour difference `x[i+1] − x[i−1]` along `dim` with replicate padding.
fn central_difference(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    if n < 2 {
        return Ok(x.zeros_like()?);
    }
    let next = Tensor::cat(&[x.narrow(dim, 1, n - 1)?, x.narrow(dim, n - 1, 1)?], dim)?;
    let prev = Tensor::cat(&[x.narrow(dim, 0, 1)?, x.narrow(dim, 0, n - 1)?], dim)?;
    Ok((next - prev)?)
}

/// Gradient magnitude `‖∇y‖` of a `(batch, 1, h, w)` map, exactly zero where
/// both differences vanish, together with the squared magnitude.
pub fn gradient_magnitude(y: &Tensor) -> Result<(Tensor, Tensor)> {
    let gx = central_difference(y, 3)?;
    let gy = central_difference(y, 2)?;
    let sq = (gx.sqr()? + gy.sqr()?)?;
    let nonzero = sq.gt(0.0)?.to_dtype(y.dtype())?;
    // Floor keeps the square-root derivative finite where the gate is zero.
    let mag = (sq.maximum(1e-30)?.sqrt()? * nonzero)?;
    Ok((mag, sq))
}

/// Border consistency at one level:
/// `(1/|N⁺|) Σ_{p∈N⁺} | ‖∇y(p)‖/√2 − b(p) |`, where `N⁺` holds pixels that
/// are border in the binarised prediction `b` or have nonzero road
/// gradient. Zero when `N⁺` is empty. Averaged over the batch.
pub fn border_consistency(road: &Tensor, border: &Tensor) -> Result<Tensor> {
    ensure!(
        road.dims() == border.dims(),
        "road map {:?} and border map {:?} differ in shape",
        road.dims(),
        border.dims()
    );
    let (b, _, _, _) = road.dims4()?;
    let dtype = road.dtype();
    let (mag, sq) = gradient_magnitude(road)?;
    let members = sq
        .gt(0.0)?
        .to_dtype(dtype)?
        .maximum(&border.ge(BORDER_THRESHOLD)?.to_dtype(dtype)?)?
        .detach();
    let gap = ((mag * std::f64::consts::FRAC_1_SQRT_2)? - border)?.abs()?;
    let per_sample = (gap * &members)?.flatten_from(1)?.sum(1)?;
    let counts = members.flatten_from(1)?.sum(1)?;
    let normalised = (per_sample / counts.maximum(1.0)?)?;
    Ok((normalised.sum_all()? / b as f64)?)
}

/// Area-average a `(batch, 1, H, W)` map down to `(h, w)`.
pub fn downsample_to(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, mh, mw) = map.dims4()?;
    if (mh, mw) == (h, w) {
        return Ok(map.clone());
    }
    ensure!(
        h > 0 && w > 0 && mh % h == 0 && mw % w == 0 && mh / h == mw / w,
        "cannot pool {mh}x{mw} down to {h}x{w}"
    );
    Ok(map.avg_pool2d(mh / h)?)
}

/// Supervision for one border level.
#[derive(Debug, Clone)]
pub struct LevelTarget {
    pub level: usize,
    pub mask: Tensor,
    pub weights: Vec<BalanceWeights>,
}

/// Batched ground truth aligned with a [`PredictionBundle`].
#[derive(Debug, Clone)]
pub struct Targets {
    pub road: Tensor,
    pub road_weights: Vec<BalanceWeights>,
    pub borders: Vec<LevelTarget>,
}

fn mask_batch(masks: &[&Mask], dtype: DType) -> Result<Tensor> {
    let (h, w) = masks[0].dim();
    ensure!(masks.iter().all(|m| m.dim() == (h, w)), "masks in a batch must share dims");
    let data: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Targets {
    pub fn from_samples(samples: &[RoadSample], dtype: DType) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let road = mask_batch(&samples.iter().map(|s| &s.road_mask).collect::<Vec<_>>(), dtype)?;
        let road_weights = samples
            .iter()
            .map(|s| BalanceWeights {
                pos: s.pos_weight,
                neg: s.neg_weight,
            })
            .collect();
        let borders = samples[0]
            .border_masks
            .iter()
            .map(|lb| {
                let level = lb.level;
                let per: Vec<_> = samples
                    .iter()
                    .map(|s| s.border(level).ok_or_else(|| Error::Validation(format!("sample lacks level {level}"))))
                    .collect::<Result<_>>()?;
                Ok(LevelTarget {
                    level,
                    mask: mask_batch(&per.iter().map(|b| &b.mask).collect::<Vec<_>>(), dtype)?,
                    weights: per.iter().map(|b| b.weights).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            road,
            road_weights,
            borders,
        })
    }
}

/// Scalar loss components of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_road: f64,
    /// `(level, loss)` ascending by level.
    pub l_border: Vec<(usize, f64)>,
    pub l_consistency: Vec<(usize, f64)>,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    /// `l_road + Σ l_border + λ Σ l_consistency`, summed in a fixed order.
    pub fn recompute_total(l_road: f64, l_border: &[(usize, f64)], l_cons: &[(usize, f64)], lambda: f64) -> f64 {
        let borders: f64 = l_border.iter().map(|(_, v)| v).sum();
        let cons: f64 = l_cons.iter().map(|(_, v)| v).sum();
        l_road + borders + lambda * cons
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Differentiable total.
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn total_loss(bundle: &PredictionBundle, targets: &Targets, lambda: f64) -> Result<LossOutput> {
    let road = balanced_bce(&bundle.road, &targets.road, &targets.road_weights)?;
    let mut total = road.clone();
    let mut l_border = Vec::new();
    let mut l_consistency = Vec::new();
    for lp in &bundle.borders {
        let target = targets
            .borders
            .iter()
            .find(|t| t.level == lp.level)
            .ok_or_else(|| Error::Validation(format!("no border ground truth for level {}", lp.level)))?;
        let bce = balanced_bce(&lp.prob, &target.mask, &target.weights)?;
        let (_, _, h, w) = lp.prob.dims4()?;
        let cons = border_consistency(&downsample_to(&bundle.road, h, w)?, &lp.prob)?;
        total = ((total + &bce)? + (&cons * lambda)?)?;
        l_border.push((lp.level, scalar(&bce)?));
        l_consistency.push((lp.level, scalar(&cons)?));
    }
    let l_road = scalar(&road)?;
    let report = LossReport {
        total: LossReport::recompute_total(l_road, &l_border, &l_consistency, lambda),
        l_road,
        l_border,
        l_consistency,
        lambda,
    };
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("non-finite loss components {report:?}"),
        });
    }
    Ok(LossOutput { total, report })
}
