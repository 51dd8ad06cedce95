//! Parameter initialization. Rank-1 factors get their own menu because the
//! multiplicative structure is sensitive to it; everything else is Glorot
//! or zeros.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Initialization menu for the rank-1 factor vectors.
///
/// The multiplicative factors want to start near 1 so the shared weight
/// matrix passes through roughly unscaled. `Ones` is the degenerate choice
/// that makes a member-modulated layer coincide exactly with its
/// unmodulated counterpart, used for equivalence runs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rank1Init {
    /// Entries from N(1, sd). sd 0.5 and 0.75 are the stock choices.
    Normal { sd: f64 },
    /// Entries +1 with probability `p_plus`, else -1. p 0.5 and 0.75 are
    /// the stock choices.
    RandomSign { p_plus: f64 },
    /// All ones.
    Ones,
}

impl Default for Rank1Init {
    fn default() -> Self {
        Rank1Init::Normal { sd: 0.5 }
    }
}

impl Rank1Init {
    pub fn sample(&self, members: usize, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        match *self {
            Rank1Init::Normal { sd } => {
                let dist = Normal::new(1.0, sd).expect("finite sd");
                Array2::from_shape_fn((members, n), |_| dist.sample(rng))
            }
            Rank1Init::RandomSign { p_plus } => Array2::from_shape_fn((members, n), |_| {
                if rng.random::<f64>() < p_plus {
                    1.0
                } else {
                    -1.0
                }
            }),
            Rank1Init::Ones => Array2::ones((members, n)),
        }
    }
}

/// Glorot-normal matrix, sd = sqrt(2 / (fan_in + fan_out)).
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
}

/// Glorot-normal conv kernel (kh, kw, c_in, c_out); fans count the
/// receptive field.
pub fn glorot_conv(
    rng: &mut impl Rng,
    kh: usize,
    kw: usize,
    c_in: usize,
    c_out: usize,
) -> Array4<f64> {
    let fan_in = kh * kw * c_in;
    let fan_out = kh * kw * c_out;
    let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Array4::from_shape_fn((kh, kw, c_in, c_out), |_| dist.sample(rng))
}

/// N(0, sd) vector; sd 0 gives exact zeros without touching the rng.
pub fn modulation_vec(rng: &mut impl Rng, n: usize, sd: f64) -> Array1<f64> {
    if sd == 0.0 {
        return Array1::zeros(n);
    }
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Array1::from_shape_fn(n, |_| dist.sample(rng))
}

/// N(0, sd) matrix; sd 0 gives exact zeros without touching the rng.
pub fn modulation_mat(rng: &mut impl Rng, rows: usize, cols: usize, sd: f64) -> Array2<f64> {
    if sd == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// N(0, sd) conv-kernel-shaped modulation; sd 0 gives exact zeros.
pub fn modulation_conv(
    rng: &mut impl Rng,
    kh: usize,
    kw: usize,
    c_in: usize,
    c_out: usize,
    sd: f64,
) -> Array4<f64> {
    if sd == 0.0 {
        return Array4::zeros((kh, kw, c_in, c_out));
    }
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Array4::from_shape_fn((kh, kw, c_in, c_out), |_| dist.sample(rng))
}
