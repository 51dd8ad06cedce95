//! Inverted dropout with a per-row rate. The rate is a hyperparameter, so
//! in a tiled minibatch every row can carry a different value. The mask is
//! a constant on the tape: nothing differentiates through the Bernoulli
//! draws, and the rate influences gradients only through the embedding
//! modulation elsewhere in the model.

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};

use super::LayerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropMode {
    Train,
    Eval,
}

/// Applies dropout row-wise. `rates[i]` drops entries of row `i` with that
/// probability and rescales survivors by `1/(1-rate)`, keeping the row mean
/// unbiased. Eval mode is the identity.
pub fn row_dropout(
    tape: &mut Tape,
    x: Var,
    rates: &[f64],
    mode: DropMode,
    rng: &mut impl Rng,
) -> Result<Var, LayerError> {
    let shape = tape.value(x).shape().to_vec();
    let rows = shape.first().copied().unwrap_or(0);
    if rows != rates.len() {
        return Err(LayerError::RowMismatch {
            got: rows,
            want: rates.len(),
        });
    }
    for (i, &rate) in rates.iter().enumerate() {
        if !(0.0..=0.95).contains(&rate) {
            return Err(LayerError::BadDropoutRate { row: i, rate });
        }
    }
    if mode == DropMode::Eval || rates.iter().all(|&r| r == 0.0) {
        return Ok(x);
    }

    let mut mask = Tensor::zeros(shape);
    for (i, mut row) in mask.outer_iter_mut().enumerate() {
        let rate = rates[i];
        if rate == 0.0 {
            row.fill(1.0);
            continue;
        }
        let keep_scale = 1.0 / (1.0 - rate);
        row.mapv_inplace(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        });
    }
    let m = tape.constant(mask);
    Ok(tape.mul(x, m)?)
}
