//! Region metrics (IoU, precision, recall, F1) and the boundary F-score
//! with a pixel-distance tolerance.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{extract_border, Mask};
use crate::error::{ensure, Error, Result};

/// Probability threshold for binarising predictions.
pub const PREDICTION_THRESHOLD: f32 = 0.5;
/// Boundary tolerances reported by default, in pixels.
pub const BOUNDARY_THRESHOLDS: [u32; 5] = [1, 2, 3, 4, 5];

/// Reference numbers from the published Massachusetts roads test set (%).
pub const REFERENCE_IOU: f64 = 62.94;
pub const REFERENCE_F1: f64 = 76.96;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        ensure!(pred.dim() == gt.dim(), "shape mismatch: pred {:?}, gt {:?}", pred.dim(), gt.dim());
        let mut c = Counts::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// `(precision, recall, iou, f1)`. Both masks empty scores 1 everywhere;
    /// an empty side against a nonempty one scores 0.
    pub fn ratios(&self) -> (f64, f64, f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if tp + fp + fn_ == 0.0 {
            return (1.0, 1.0, 1.0, 1.0);
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let iou = tp / (tp + fp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, iou, f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Tolerance in pixels → boundary F-score.
    pub boundary_f: BTreeMap<u32, f64>,
    pub counts: Counts,
}

impl MetricReport {
    pub fn from_counts(counts: Counts, boundary_f: BTreeMap<u32, f64>) -> Self {
        let (precision, recall, iou, f1) = counts.ratios();
        Self {
            iou,
            precision,
            recall,
            f1,
            boundary_f,
            counts,
        }
    }
}

/// Confusion counts and ratios of a binarised prediction against ground truth.
pub fn region_metrics(pred: &Mask, gt: &Mask) -> Result<MetricReport> {
    Ok(MetricReport::from_counts(Counts::from_masks(pred, gt)?, BTreeMap::new()))
}

/// Both region and boundary metrics at the given tolerances.
pub fn evaluate_masks(pred: &Mask, gt: &Mask, thresholds: &[u32]) -> Result<MetricReport> {
    let mut report = region_metrics(pred, gt)?;
    report.boundary_f = boundary_f_multi(pred, gt, thresholds)?;
    Ok(report)
}

pub fn binarize(prob: &Array2<f32>) -> Mask {
    prob.mapv(|p| u8::from(p >= PREDICTION_THRESHOLD))
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform of a sampled function (lower
/// envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never steps below the first parabola.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from each pixel to the nearest set pixel of
/// `features`; `None` when `features` is empty.
pub fn squared_distance_transform(features: &Mask) -> Option<Array2<f64>> {
    if !features.iter().any(|&v| v != 0) {
        return None;
    }
    let (h, w) = features.dim();
    let mut grid = features.mapv(|v| if v != 0 { 0.0 } else { FAR });
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        let col: Vec<f64> = grid.column(x).to_vec();
        edt_1d(&col, &mut buf[..h]);
        grid.column_mut(x).iter_mut().zip(&buf[..h]).for_each(|(g, &b)| *g = b);
    }
    for y in 0..h {
        let row: Vec<f64> = grid.row(y).to_vec();
        edt_1d(&row, &mut buf[..w]);
        grid.row_mut(y).iter_mut().zip(&buf[..w]).for_each(|(g, &b)| *g = b);
    }
    Some(grid)
}

/// Fraction of `from` pixels within `tol` of some pixel in `to_dist`'s
/// feature set.
fn matched_fraction(from: &Mask, to_dist: &Option<Array2<f64>>, tol: u32) -> f64 {
    let total = from.iter().filter(|&&v| v != 0).count();
    let Some(dist) = to_dist else { return 0.0 };
    let tol2 = (tol as f64) * (tol as f64);
    let hits = from
        .iter()
        .zip(dist.iter())
        .filter(|(&v, &d)| v != 0 && d <= tol2)
        .count();
    hits as f64 / total as f64
}

/// Boundary F-score at several tolerances sharing one pair of distance
/// transforms.
pub fn boundary_f_multi(pred: &Mask, gt: &Mask, thresholds: &[u32]) -> Result<BTreeMap<u32, f64>> {
    ensure!(pred.dim() == gt.dim(), "shape mismatch: pred {:?}, gt {:?}", pred.dim(), gt.dim());
    let pb = extract_border(&pred.mapv(|v| u8::from(v != 0)), 1)?;
    let gb = extract_border(&gt.mapv(|v| u8::from(v != 0)), 1)?;
    let p_empty = !pb.iter().any(|&v| v != 0);
    let g_empty = !gb.iter().any(|&v| v != 0);
    let pd = squared_distance_transform(&pb);
    let gd = squared_distance_transform(&gb);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let f = match (p_empty, g_empty) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => {
                    let precision = matched_fraction(&pb, &gd, t);
                    let recall = matched_fraction(&gb, &pd, t);
                    if precision + recall > 0.0 {
                        2.0 * precision * recall / (precision + recall)
                    } else {
                        0.0
                    }
                }
            };
            (t, f)
        })
        .collect())
}

/// Boundary F-score with tolerance `threshold_px`.
pub fn boundary_f(pred: &Mask, gt: &Mask, threshold_px: u32) -> Result<f64> {
    Ok(boundary_f_multi(pred, gt, &[threshold_px])?[&threshold_px])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Region ratios from summed confusion counts.
    #[default]
    Micro,
    /// Region ratios averaged over images.
    Macro,
}

/// Dataset-level report. Boundary F-scores are always averaged over images.
pub fn aggregate(reports: &[MetricReport], mode: Averaging) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Validation("cannot aggregate an empty report list".into()));
    }
    let n = reports.len() as f64;
    let counts = reports.iter().fold(Counts::default(), |acc, r| acc.add(r.counts));
    let mut boundary_f = BTreeMap::new();
    for r in reports {
        for (&t, &v) in &r.boundary_f {
            *boundary_f.entry(t).or_insert(0.0) += v / n;
        }
    }
    Ok(match mode {
        Averaging::Micro => MetricReport::from_counts(counts, boundary_f),
        Averaging::Macro => {
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            MetricReport {
                iou: mean(|r| r.iou),
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
                f1: mean(|r| r.f1),
                boundary_f,
                counts,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(size: usize, top: usize, left: usize, side: usize) -> Mask {
        let mut m = Mask::zeros((size, size));
        m.slice_mut(ndarray::s![top..top + side, left..left + side]).fill(1);
        m
    }

    #[test]
    fn identical_masks_are_perfect() {
        let m = square(16, 3, 4, 6);
        let r = region_metrics(&m, &m).unwrap();
        assert_eq!((r.iou, r.f1), (1.0, 1.0));
        for t in BOUNDARY_THRESHOLDS {
            assert_eq!(boundary_f(&m, &m, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn forced_arithmetic() {
        let c = Counts { tp: 5, fp: 3, fn_: 2, tn: 0 };
        let (p, r, iou, f1) = c.ratios();
        assert_eq!(iou, 0.5);
        assert_eq!(p, 5.0 / 8.0);
        assert_eq!(r, 5.0 / 7.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let z = Mask::zeros((4, 4));
        let r = region_metrics(&z, &z).unwrap();
        assert_eq!((r.iou, r.f1, r.precision, r.recall), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(boundary_f(&z, &z, 1).unwrap(), 1.0);
        let m = square(4, 1, 1, 2);
        assert_eq!(region_metrics(&z, &m).unwrap().iou, 0.0);
        assert_eq!(region_metrics(&m, &z).unwrap().f1, 0.0);
        assert_eq!(boundary_f(&z, &m, 3).unwrap(), 0.0);
    }

    #[test]
    fn shifted_square_within_one_pixel() {
        let gt = square(12, 3, 3, 5);
        let pred = square(12, 3, 4, 5);
        for t in 1..=5 {
            assert_eq!(boundary_f(&pred, &gt, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn distant_boundaries_score_zero() {
        let gt = square(32, 1, 1, 5);
        let pred = square(32, 20, 20, 5);
        for t in 1..=5 {
            assert_eq!(boundary_f(&pred, &gt, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(region_metrics(&Mask::zeros((2, 2)), &Mask::zeros((3, 2))).is_err());
        assert!(boundary_f(&Mask::zeros((2, 2)), &Mask::zeros((3, 2)), 1).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = MetricReport::from_counts(Counts { tp: 1, fp: 1, fn_: 0, tn: 0 }, BTreeMap::from([(2, 0.5)]));
        let b = MetricReport::from_counts(Counts { tp: 1, fp: 0, fn_: 1, tn: 0 }, BTreeMap::from([(2, 1.0)]));
        let agg = aggregate(&[a.clone(), b], Averaging::Micro).unwrap();
        assert_eq!(agg.iou, 0.5);
        assert_eq!(agg.boundary_f[&2], 0.75);
        assert_eq!(aggregate(std::slice::from_ref(&a), Averaging::Micro).unwrap(), a);
        let twice = aggregate(&[a.clone(), a.clone()], Averaging::Micro).unwrap();
        assert_eq!((twice.iou, twice.precision, twice.recall, twice.f1), (a.iou, a.precision, a.recall, a.f1));
        assert_eq!(twice.boundary_f, a.boundary_f);
        assert_eq!(twice.counts, a.counts.add(a.counts));
        assert!(aggregate(&[], Averaging::Micro).is_err());
    }

    #[test]
    fn json_schema() {
        let r = evaluate_masks(&square(8, 1, 1, 3), &square(8, 1, 2, 3), &BOUNDARY_THRESHOLDS).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["iou", "precision", "recall", "f1"] {
            assert!(v[key].is_number());
        }
        for t in ["1", "2", "3", "4", "5"] {
            assert!(v["boundary_f"][t].is_number());
        }
        for k in ["tp", "fp", "fn", "tn"] {
            assert!(v["counts"][k].is_u64());
        }
        let back: MetricReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
