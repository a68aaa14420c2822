//! Evaluation metrics: standard monocular depth errors and semantic mIoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Fractions with max(pred/gt, gt/pred) < 1.25^k for k = 1, 2, 3.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Depth errors over pixels valid in both maps with ground truth inside
/// `[min_depth, max_depth]`. Predictions are clamped to the same range; no
/// median scaling is applied.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, min_depth: f64, max_depth: f64) -> Result<DepthMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Contract("depth metric inputs must share shape".into()));
    }
    if !(min_depth > 0.0 && max_depth > min_depth) {
        return Err(Error::Config("require 0 < min_depth < max_depth".into()));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sse, mut sse_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    for i in 0..pred.values.len() {
        if !(pred.valid[i] && gt.valid[i]) {
            continue;
        }
        let g = gt.values[i];
        if g < min_depth || g > max_depth {
            continue;
        }
        let p = pred.values[i].clamp(min_depth, max_depth);
        n += 1;
        let err = p - g;
        abs_rel += err.abs() / g;
        sq_rel += err * err / g;
        sse += err * err;
        let le = p.ln() - g.ln();
        sse_log += le * le;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::DegenerateInput("no jointly-valid in-range depth pixels".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sse / nf).sqrt(),
        rmse_log: (sse_log / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        n_pixels: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// Per-class IoU; `None` when the class appears in neither prediction nor
    /// ground truth (excluded from the mean).
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Mean intersection-over-union over `n_classes` hard labels.
pub fn miou(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<IouReport> {
    if pred.len() != gt.len() {
        return Err(Error::Contract("miou inputs must share length".into()));
    }
    if pred.is_empty() {
        return Err(Error::DegenerateInput("miou over empty label set".into()));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::Contract("label out of range".into()));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::DegenerateInput("no class present in either labeling".into()));
    }
    Ok(IouReport { miou: present.iter().sum::<f64>() / present.len() as f64, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn doubled_prediction_closed_form() {
        let gt = DepthMap::constant(8, 8, 3.0);
        let pred = DepthMap::constant(8, 8, 6.0);
        let m = depth_metrics(&pred, &gt, 0.1, 20.0).unwrap();
        assert_relative_eq!(m.abs_rel, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.sq_rel, 3.0, epsilon = 1e-12);
        assert_relative_eq!(m.rmse, 3.0, epsilon = 1e-12);
        assert_relative_eq!(m.rmse_log, 2.0f64.ln(), epsilon = 1e-12);
        // ratio 2 exceeds 1.25^3 = 1.953
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 0.0);
        assert_eq!(m.delta3, 0.0);
    }

    #[test]
    fn perfect_prediction_is_zero_error() {
        let gt = DepthMap::constant(4, 4, 2.5);
        let m = depth_metrics(&gt, &gt, 0.1, 20.0).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.n_pixels, 16);
    }

    #[test]
    fn out_of_range_gt_excluded_and_pred_clamped() {
        let mut gt = DepthMap::constant(2, 1, 1.0);
        gt.set(1, 0, 100.0); // beyond max -> excluded
        let pred = DepthMap::constant(2, 1, 50.0); // clamps to max = 20
        let m = depth_metrics(&pred, &gt, 0.1, 20.0).unwrap();
        assert_eq!(m.n_pixels, 1);
        assert_relative_eq!(m.abs_rel, 19.0, epsilon = 1e-12);
    }

    #[test]
    fn no_valid_pixels_is_degenerate() {
        let gt = DepthMap::invalid(3, 3);
        let pred = DepthMap::constant(3, 3, 1.0);
        assert!(depth_metrics(&pred, &gt, 0.1, 20.0).is_err());
    }

    #[test]
    fn miou_perfect_is_one() {
        let labels = vec![0usize, 1, 2, 1, 0];
        let r = miou(&labels, &labels, 3).unwrap();
        assert_relative_eq!(r.miou, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn miou_known_confusion() {
        // gt: [0,0,1,1]; pred: [0,1,1,1]
        // class 0: inter 1, union 2 -> 0.5; class 1: inter 2, union 3 -> 2/3
        let gt = vec![0usize, 0, 1, 1];
        let pred = vec![0usize, 1, 1, 1];
        let r = miou(&pred, &gt, 3).unwrap();
        assert_relative_eq!(r.per_class[0].unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(r.per_class[1].unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert!(r.per_class[2].is_none());
        assert_relative_eq!(r.miou, (0.5 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }
}
