//! Border ground truth: inner morphological boundary, max-pool pyramid, and
//! class-balance weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{ensure, Result};

pub(crate) fn check_binary(mask: &Mask, what: &str) -> Result<()> {
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return Err(crate::Error::Validation(format!(
            "{what} must be binary {{0,1}}, found value {v}"
        )));
    }
    Ok(())
}

/// Square-window erosion that only looks at in-bounds pixels, so regions
/// touching the image edge are not eroded from outside.
fn erode(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.dim();
    let mut rows = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[[y, x]] = (lo..=hi).map(|xx| mask[[y, xx]]).min().unwrap_or(0);
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).map(|yy| rows[[yy, x]]).min().unwrap_or(0);
        }
    }
    out
}

/// Road border of a binary mask: road pixels that an erosion with a
/// `(2·radius+1)²` square removes. Out-of-image pixels never count as
/// background, so a road cut by the tile edge gets no border along that edge.
pub fn extract_border(mask: &Mask, radius: usize) -> Result<Mask> {
    ensure!(radius >= 1, "border radius must be >= 1, got {radius}");
    check_binary(mask, "mask")?;
    if mask.is_empty() {
        return Ok(mask.clone());
    }
    let eroded = erode(mask, radius);
    Ok(ndarray::Zip::from(mask)
        .and(&eroded)
        .map_collect(|&m, &e| m & (1 - e)))
}

/// Max-pool a full-resolution border at each stride; a coarse pixel is set
/// iff any fine pixel in its window is.
pub fn border_pyramid(border: &Mask, strides: &[usize]) -> Result<Vec<Mask>> {
    check_binary(border, "border")?;
    let (h, w) = border.dim();
    strides
        .iter()
        .map(|&s| {
            ensure!(
                s > 0 && h % s == 0 && w % s == 0,
                "stride {s} does not divide border dims {h}x{w}"
            );
            let mut out = Array2::<u8>::zeros((h / s, w / s));
            for ((y, x), &v) in border.indexed_iter() {
                if v == 1 {
                    out[[y / s, x / s]] = 1;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Holistically-nested style class balance for a binary target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    /// Weight applied to positive pixels: fraction of negatives.
    pub pos: f64,
    /// Weight applied to negative pixels: fraction of positives.
    pub neg: f64,
}

pub fn balance_weights(target: &Mask) -> Result<BalanceWeights> {
    ensure!(!target.is_empty(), "cannot balance an empty mask");
    check_binary(target, "target")?;
    let total = target.len() as f64;
    let positives = target.iter().filter(|&&v| v == 1).count() as f64;
    Ok(BalanceWeights {
        pos: (total - positives) / total,
        neg: positives / total,
    })
}
