//! Match-quality metrics and the nearest-neighbour baselines.
//!
//! A match is correct when its reprojection error under the ground-truth
//! homography is below the pair's tolerance. AUC@10 is the area under the
//! fraction of matches with error `< t` for `t ∈ [0, 10]`, divided by 10.
//! That curve is a step function of `t`, so the area is computed exactly as
//! `Σ max(0, 10 − e_k) / (10·n)`.

use serde::{Deserialize, Serialize};

use crate::data::PairSample;
use crate::keypoints::KeypointSet;
use crate::matcher::{Match, MatchSet};

/// Upper limit of the AUC integral and of the MMA thresholds, in pixels.
pub const AUC_LIMIT: f64 = 10.0;
pub const MMA_THRESHOLDS: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc10: f64,
    /// Fraction of matches with error `< t` px for `t = 1..=10`.
    pub mma: Vec<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub matches: usize,
    pub gt_matches: usize,
    /// Set when there were no matches, making precision undefined (reported 0).
    pub empty: bool,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Exact staircase area of the error CDF on `[0, limit]`, normalized.
pub fn auc(errors: &[f64], limit: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().map(|&e| (limit - e).clamp(0.0, limit)).sum::<f64>() / (limit * errors.len() as f64)
}

/// Fraction of errors strictly below each of `1..=thresholds` px.
pub fn mma(errors: &[f64], thresholds: usize) -> Vec<f64> {
    (1..=thresholds)
        .map(|t| {
            if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e < t as f64).count() as f64 / errors.len() as f64
            }
        })
        .collect()
}

pub fn compute_metrics(matches: &MatchSet, sample: &PairSample) -> MetricsReport {
    let errors: Vec<f64> = matches
        .matches
        .iter()
        .map(|m| sample.reprojection_error(m.i, m.j))
        .collect();
    let tp = errors.iter().filter(|&&e| e < sample.eps_gt).count();
    let n = errors.len();
    let gt = sample.gt.matches.len();
    let recovered = tp.min(gt);
    let precision = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
    let recall = if gt == 0 { 0.0 } else { recovered as f64 / gt as f64 };
    MetricsReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        auc10: auc(&errors, AUC_LIMIT),
        mma: mma(&errors, MMA_THRESHOLDS),
        tp,
        fp: n - tp,
        fn_: gt - recovered,
        matches: n,
        gt_matches: gt,
        empty: n == 0,
    }
}

/// Micro-averaged precision/recall/F1 over all pairs; AUC and MMA are means
/// of the per-pair values.
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    if reports.is_empty() {
        return MetricsReport {
            mma: vec![0.0; MMA_THRESHOLDS],
            empty: true,
            ..Default::default()
        };
    }
    let tp: usize = reports.iter().map(|r| r.tp).sum();
    let fp: usize = reports.iter().map(|r| r.fp).sum();
    let fn_: usize = reports.iter().map(|r| r.fn_).sum();
    let matches: usize = reports.iter().map(|r| r.matches).sum();
    let gt_matches: usize = reports.iter().map(|r| r.gt_matches).sum();
    let precision = if matches == 0 { 0.0 } else { tp as f64 / matches as f64 };
    let recovered = gt_matches - fn_;
    let recall = if gt_matches == 0 {
        0.0
    } else {
        recovered as f64 / gt_matches as f64
    };
    let k = reports.len() as f64;
    let mma = (0..MMA_THRESHOLDS)
        .map(|t| reports.iter().map(|r| r.mma.get(t).copied().unwrap_or(0.0)).sum::<f64>() / k)
        .collect();
    MetricsReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        auc10: reports.iter().map(|r| r.auc10).sum::<f64>() / k,
        mma,
        tp,
        fp,
        fn_,
        matches,
        gt_matches,
        empty: matches == 0,
    }
}

fn similarities(x: &KeypointSet, y: &KeypointSet) -> Vec<f64> {
    let (m, n) = (x.len(), y.len());
    let mut s = vec![0.0; m * n];
    for i in 0..m {
        let a = x.descriptors().row(i);
        for j in 0..n {
            let b = y.descriptors().row(j);
            s[i * n + j] = a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum();
        }
    }
    s
}

fn first_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Nearest neighbour by descriptor inner product, optionally kept only when
/// mutual. Confidence maps cosine similarity from `[-1, 1]` into `(0, 1]`.
pub fn nn_baseline(x: &KeypointSet, y: &KeypointSet, mutual: bool) -> MatchSet {
    let (m, n) = (x.len(), y.len());
    if m == 0 || n == 0 {
        return MatchSet::default();
    }
    let s = similarities(x, y);
    let col_best: Vec<usize> = (0..n)
        .map(|j| first_argmax((0..m).map(|i| s[i * n + j])).expect("m > 0"))
        .collect();
    let mut matches = Vec::new();
    for i in 0..m {
        let j = first_argmax((0..n).map(|j| s[i * n + j])).expect("n > 0");
        if mutual && col_best[j] != i {
            continue;
        }
        let confidence = ((s[i * n + j] + 1.0) / 2.0).clamp(f64::MIN_POSITIVE, 1.0);
        matches.push(Match { i, j, confidence });
    }
    MatchSet { matches }
}
