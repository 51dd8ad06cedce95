//! In-memory datasets, deterministic splits, and synthetic generators.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::stream_rng;

/// A classification dataset: row-major features and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Self {
        assert_eq!(features.shape()[0], labels.len(), "one label per row");
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < classes, "label {l} at row {i} outside [0, {classes})");
        }
        Dataset {
            features,
            labels,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Select rows by index, in order.
    pub fn take(&self, idx: &[usize]) -> Dataset {
        let features = Array2::from_shape_fn((idx.len(), self.dim()), |(i, j)| {
            self.features[[idx[i], j]]
        });
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.classes)
    }

    /// Deterministic shuffled split into (first, second) parts where the
    /// first receives `fraction` of the rows (rounded down, at least one row
    /// on each side when possible).
    pub fn subdivide(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let (a, b) = split_indices(self.len(), fraction, seed);
        (self.take(&a), self.take(&b))
    }
}

/// Shuffled index split; a pure function of `(n, fraction, seed)` so the
/// same seed always cuts a dataset of a given size the same way.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!((0.0..=1.0).contains(&fraction), "fraction outside [0,1]");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0, "split");
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut cut = (fraction * n as f64).floor() as usize;
    if n >= 2 {
        cut = cut.clamp(1, n - 1);
    }
    let rest = idx.split_off(cut);
    (idx, rest)
}

/// Synthetic task families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// Two unit-variance Gaussian clouds whose centers sit `separation`
    /// apart along the first feature, padded with pure-noise dimensions.
    TwoGaussians {
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        nuisance_dims: usize,
    },
    /// Binary labels from a thresholded regression surface whose two
    /// halves carry very different signal-to-noise ratios, so the best L2
    /// strength differs sharply between the regimes.
    TwoRegimeRegression,
    /// Points on a circle far from the origin; a shift-detection
    /// counterpart for models trained on clustered data.
    Ring {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        nuisance_dims: usize,
    },
}

fn default_separation() -> f64 {
    10.0
}

fn default_radius() -> f64 {
    8.0
}

/// Generate `n` samples of the given task; identical bytes per seed.
pub fn synth(kind: &SynthKind, n: usize, seed: u64) -> Dataset {
    match kind {
        SynthKind::TwoGaussians {
            separation,
            nuisance_dims,
        } => two_gaussians(n, *separation, *nuisance_dims, seed),
        SynthKind::TwoRegimeRegression => two_regime(n, seed),
        SynthKind::Ring {
            radius,
            nuisance_dims,
        } => ring(n, *radius, *nuisance_dims, seed),
    }
}

fn two_gaussians(n: usize, separation: f64, nuisance_dims: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 0, "synth-two-gaussians");
    let d = 2 + nuisance_dims;
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = usize::from(rng.random::<f64>() < 0.5);
        let center = if label == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
        let jitter: f64 = StandardNormal.sample(&mut rng);
        features[[i, 0]] = center + jitter;
        for j in 1..d {
            features[[i, j]] = StandardNormal.sample(&mut rng);
        }
        labels.push(label);
    }
    Dataset::new(features, labels, 2)
}

fn two_regime(n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 0, "synth-two-regime");
    let mut features = Array2::<f64>::zeros((n, 4));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..4 {
            features[[i, j]] = StandardNormal.sample(&mut rng);
        }
        // First half-space: strong clean signal through one feature.
        // Second: weak diffuse signal drowned in label noise.
        let y = if features[[i, 0]] > 0.0 {
            3.0 * features[[i, 1]]
        } else {
            0.6 * (features[[i, 2]] + features[[i, 3]])
        };
        let noise: f64 = StandardNormal.sample(&mut rng);
        labels.push(usize::from(y + 0.5 * noise > 0.0));
    }
    Dataset::new(features, labels, 2)
}

fn ring(n: usize, radius: f64, nuisance_dims: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 0, "synth-ring");
    let d = 2 + nuisance_dims;
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let wobble: f64 = StandardNormal.sample(&mut rng);
        let r = radius + 0.1 * wobble;
        features[[i, 0]] = r * theta.cos();
        features[[i, 1]] = r * theta.sin();
        for j in 2..d {
            features[[i, j]] = StandardNormal.sample(&mut rng);
        }
        labels.push(usize::from(rng.random::<f64>() < 0.5));
    }
    Dataset::new(features, labels, 2)
}
