//! Predictive-uncertainty metrics.
//!
//! Everything here consumes probability matrices (rows sum to 1) and plain
//! label vectors. The shift-detection trio treats in-distribution samples
//! as the positive class and max-probability as the detection score.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::objectives::PROB_CLAMP;

/// One equal-width calibration bin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of samples in the bin; 0 when empty.
    pub confidence: f64,
    /// Accuracy of samples in the bin; 0 when empty.
    pub accuracy: f64,
}

/// Scalar metric bundle for one evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub nll: f64,
    pub accuracy: f64,
    pub brier: f64,
    pub ece: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mmc_out: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fpr_at_95_tpr: Option<f64>,
    pub n: usize,
    pub bins: Vec<EceBin>,
}

/// Default number of calibration bins.
pub const DEFAULT_ECE_BINS: usize = 15;

/// Row argmax with ties broken toward the lowest class index.
pub fn argmax_rows(probs: ArrayView2<f64>) -> Vec<usize> {
    probs
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn check_rows(probs: &ArrayView2<f64>, labels: &[usize]) {
    let (n, classes) = (probs.shape()[0], probs.shape()[1]);
    assert_eq!(labels.len(), n, "one label per row");
    assert!(n > 0, "empty prediction set");
    for (i, row) in probs.outer_iter().enumerate() {
        let s: f64 = row.sum();
        assert!(
            (s - 1.0).abs() < 1e-6,
            "row {i} sums to {s}, not a probability vector"
        );
        assert!(labels[i] < classes, "label {} out of range", labels[i]);
    }
}

/// Mean NLL (true-class probability clamped at [`PROB_CLAMP`]), accuracy
/// under the lowest-index tie rule, and the sum-of-squares Brier score.
pub fn basic_metrics(probs: ArrayView2<f64>, labels: &[usize]) -> (f64, f64, f64) {
    check_rows(&probs, labels);
    let (n, classes) = (probs.shape()[0], probs.shape()[1]);
    let preds = argmax_rows(probs);
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut brier = 0.0;
    for i in 0..n {
        nll -= probs[[i, labels[i]]].max(PROB_CLAMP).ln();
        if preds[i] == labels[i] {
            correct += 1;
        }
        for c in 0..classes {
            let t = if c == labels[i] { 1.0 } else { 0.0 };
            let d = probs[[i, c]] - t;
            brier += d * d;
        }
    }
    (
        nll / n as f64,
        correct as f64 / n as f64,
        brier / n as f64,
    )
}

/// Expected calibration error over `n_bins` equal-width confidence bins.
/// A confidence exactly on a bin boundary goes to the upper bin.
pub fn ece(probs: ArrayView2<f64>, labels: &[usize], n_bins: usize) -> (f64, Vec<EceBin>) {
    check_rows(&probs, labels);
    assert!(n_bins >= 1, "need at least one bin");
    let n = probs.shape()[0];
    let preds = argmax_rows(probs);

    let mut counts = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    for i in 0..n {
        let conf = probs[[i, preds[i]]];
        let bin = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        counts[bin] += 1;
        conf_sum[bin] += conf;
        hit_sum[bin] += if preds[i] == labels[i] { 1.0 } else { 0.0 };
    }

    let width = 1.0 / n_bins as f64;
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (confidence, accuracy) = if counts[b] > 0 {
            (
                conf_sum[b] / counts[b] as f64,
                hit_sum[b] / counts[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if counts[b] > 0 {
            total += counts[b] as f64 / n as f64 * (accuracy - confidence).abs();
        }
        bins.push(EceBin {
            lower: b as f64 * width,
            upper: (b + 1) as f64 * width,
            count: counts[b],
            confidence,
            accuracy,
        });
    }
    (total, bins)
}

/// Mean pairwise disagreement of member argmax predictions, normalized by
/// `1 - ensemble_accuracy`. Absent when the ensemble is perfect.
pub fn diversity(member_preds: &[Vec<usize>], ensemble_accuracy: f64) -> Option<f64> {
    let members = member_preds.len();
    assert!(members >= 2, "diversity needs at least two members");
    let n = member_preds[0].len();
    assert!(n > 0, "empty prediction set");
    for p in member_preds {
        assert_eq!(p.len(), n, "member prediction lengths differ");
    }
    if ensemble_accuracy >= 1.0 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..members {
        for b in a + 1..members {
            let disagree = (0..n)
                .filter(|&i| member_preds[a][i] != member_preds[b][i])
                .count();
            total += disagree as f64 / n as f64;
            pairs += 1;
        }
    }
    Some(total / pairs as f64 / (1.0 - ensemble_accuracy))
}

fn confidences(probs: ArrayView2<f64>) -> Vec<f64> {
    let preds = argmax_rows(probs);
    preds
        .iter()
        .enumerate()
        .map(|(i, &c)| probs[[i, c]])
        .collect()
}

/// Mann-Whitney AUROC with tied scores counted half.
fn auroc_from_confidences(in_conf: &[f64], out_conf: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = in_conf
        .iter()
        .map(|&c| (c, true))
        .chain(out_conf.iter().map(|&c| (c, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_in += midrank;
            }
        }
        i = j;
    }
    let n_in = in_conf.len() as f64;
    let n_out = out_conf.len() as f64;
    let u = rank_sum_in - n_in * (n_in + 1.0) / 2.0;
    u / (n_in * n_out)
}

/// Mean max confidence on the out set, AUROC of in-vs-out detection, and
/// the false positive rate at the threshold that keeps 95% of the in set.
///
/// The threshold is the `ceil(0.95 * n_in)`-th largest in-confidence; a
/// sample counts as detected in-distribution when its confidence is at or
/// above it.
pub fn ood_metrics(in_probs: ArrayView2<f64>, out_probs: ArrayView2<f64>) -> (f64, f64, f64) {
    assert!(
        in_probs.shape()[0] > 0 && out_probs.shape()[0] > 0,
        "both sets must be nonempty"
    );
    let in_conf = confidences(in_probs);
    let out_conf = confidences(out_probs);

    let mmc_out = out_conf.iter().sum::<f64>() / out_conf.len() as f64;
    let auroc = auroc_from_confidences(&in_conf, &out_conf);

    let mut sorted = in_conf.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (0.95 * sorted.len() as f64).ceil() as usize;
    let threshold = sorted[k.max(1) - 1];
    let fp = out_conf.iter().filter(|&&c| c >= threshold).count();
    let fpr = fp as f64 / out_conf.len() as f64;

    (mmc_out, auroc, fpr)
}

/// Full report for one prediction set, with the optional parts left absent.
pub fn metric_report(probs: ArrayView2<f64>, labels: &[usize], n_bins: usize) -> MetricReport {
    let (nll, accuracy, brier) = basic_metrics(probs, labels);
    let (ece_val, bins) = ece(probs, labels, n_bins);
    MetricReport {
        nll,
        accuracy,
        brier,
        ece: ece_val,
        diversity: None,
        mmc_out: None,
        auroc: None,
        fpr_at_95_tpr: None,
        n: labels.len(),
        bins,
    }
}
