//! ROC curves over verdict scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this count as positive; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// Highest TPR reachable with no false positives.
    pub tpr_at_fpr0: f64,
    /// Lowest FPR at which every positive is caught.
    pub fpr_at_tpr1: f64,
}

/// Trapezoidal area under `(fpr, tpr)` points sorted by fpr.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Builds the ROC curve that sweeps the threshold over every distinct score.
/// The trapezoidal AUC equals the Mann-Whitney statistic with ties counted
/// as one half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Result<RocCurve> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Input("ROC needs at least one positive and one negative score".into()));
    }
    if positive.iter().chain(negative).any(|s| s.is_nan()) {
        return Err(Error::Input("ROC scores must not be NaN".into()));
    }
    let mut scored: Vec<(f64, bool)> =
        positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positive.len() as f64, negative.len() as f64);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / n, tpr: tp as f64 / p });
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|q| (q.fpr, q.tpr)).collect();
    let tpr_at_fpr0 = points.iter().filter(|q| q.fpr == 0.0).map(|q| q.tpr).fold(0.0, f64::max);
    let fpr_at_tpr1 = points.iter().filter(|q| q.tpr == 1.0).map(|q| q.fpr).fold(1.0, f64::min);
    Ok(RocCurve { auc: trapezoid_area(&xy), points, tpr_at_fpr0, fpr_at_tpr1 })
}

/// One-sided sign test of "above the chance level" over per-repetition values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub above: usize,
    pub below: usize,
    pub ties: usize,
    /// `P(X >= above)` for `X ~ Binomial(above + below, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(values: &[f64], chance: f64) -> SignTest {
    let above = values.iter().filter(|&&v| v > chance).count();
    let below = values.iter().filter(|&&v| v < chance).count();
    let ties = values.len() - above - below;
    let trials = above + below;
    let mut p_value = 0.0;
    let mut coeff = 1.0f64;
    for k in 0..=trials {
        if k > 0 {
            coeff = coeff * (trials - k + 1) as f64 / k as f64;
        }
        if k >= above {
            p_value += coeff;
        }
    }
    p_value /= 2f64.powi(trials as i32);
    SignTest { above, below, ties, p_value }
}
