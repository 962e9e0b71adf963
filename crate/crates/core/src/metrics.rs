//! Hard segmentation and slope metrics for evaluation.

use serde::{Deserialize, Serialize};

use crate::geometry::Slope;
use crate::net::THRESHOLD;
use crate::tensor::Scalar;

/// Voxels strictly above [`THRESHOLD`] are foreground.
pub fn binarize<T: Scalar>(prob: &[T]) -> Vec<bool> {
    prob.iter().map(|p| p.as_f64() > THRESHOLD).collect()
}

/// `(|A ∩ B|, |A|, |B|)`.
pub fn overlap(pred: &[bool], truth: &[bool]) -> (usize, usize, usize) {
    assert_eq!(pred.len(), truth.len(), "mask lengths differ");
    pred.iter()
        .zip(truth)
        .fold((0, 0, 0), |(i, a, b), (&p, &t)| (i + (p && t) as usize, a + p as usize, b + t as usize))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[bool], truth: &[bool]) -> f64 {
    let (i, a, b) = overlap(pred, truth);
    if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    let (i, a, b) = overlap(pred, truth);
    let union = a + b - i;
    if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    }
}

/// Mean absolute componentwise difference between a raw prediction and the
/// unit ground-truth slope.
pub fn slope_mae(pred: [f64; 3], truth: &Slope) -> f64 {
    (0..3).map(|k| (pred[k] - truth.0[k]).abs()).sum::<f64>() / 3.0
}

/// Metrics of a single evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub dice: f64,
    pub iou: f64,
    /// Absent without a slope head.
    pub slope_mae: Option<f64>,
    pub angular_err_deg: Option<f64>,
    /// The predicted mask had fewer than two foreground voxels.
    pub degenerate: bool,
}

impl SampleMetrics {
    pub fn compute<T: Scalar>(prob: &[T], truth_mask: &[T], slope_pred: Option<[f64; 3]>, truth: &Slope) -> Self {
        let pred = binarize(prob);
        let truth_bin = binarize(truth_mask);
        let fg = pred.iter().filter(|&&p| p).count();
        Self {
            dice: dice(&pred, &truth_bin),
            iou: iou(&pred, &truth_bin),
            slope_mae: slope_pred.map(|s| slope_mae(s, truth)),
            angular_err_deg: slope_pred.and_then(|s| truth.angular_error_deg(s)),
            degenerate: fg < 2,
        }
    }
}

/// Means over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dice: f64,
    pub iou: f64,
    pub slope_mae: Option<f64>,
    pub angular_err_deg: Option<f64>,
    pub degenerate_count: usize,
    pub samples: usize,
}

impl EvalSummary {
    /// Slope means are absent when no sample carries a slope prediction.
    pub fn from_samples(samples: &[SampleMetrics]) -> Self {
        let n = samples.len().max(1) as f64;
        let mean_opt = |f: fn(&SampleMetrics) -> Option<f64>| {
            let v: Vec<f64> = samples.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            dice: samples.iter().map(|s| s.dice).sum::<f64>() / n,
            iou: samples.iter().map(|s| s.iou).sum::<f64>() / n,
            slope_mae: mean_opt(|s| s.slope_mae),
            angular_err_deg: mean_opt(|s| s.angular_err_deg),
            degenerate_count: samples.iter().filter(|s| s.degenerate).count(),
            samples: samples.len(),
        }
    }
}
