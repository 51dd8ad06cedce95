//! Minibatch tiling for single-pass multi-member evaluation.
//!
//! A batch of `b` rows is repeated K times; block `k` (rows `k*b..(k+1)*b`)
//! belongs to member `k`. These helpers produce the member indices and
//! per-row hyperparameter rows for that fixed layout, and average the K
//! member outputs back down to `b` rows.

use ndarray::{Array2, ArrayView2};

use crate::diffcore::{DiffError, Tape, Var};

/// Member index per tiled row: `(0,...,0, 1,...,1, ..., K-1,...)`, each
/// block of length `batch`.
pub fn tiled_members(batch: usize, members: usize) -> Vec<usize> {
    (0..batch * members).map(|i| i / batch).collect()
}

/// Repeats each member's hyperparameter row `batch` times, matching the
/// tiled layout: row `k*batch + i` is `lambdas[k]`.
pub fn tile_lambda_rows(lambdas: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let (members, dims) = (lambdas.shape()[0], lambdas.shape()[1]);
    Array2::from_shape_fn((members * batch, dims), |(row, j)| {
        lambdas[[row / batch, j]]
    })
}

/// Averages the K member blocks of a tiled `(batch*K, c)` output back to
/// `(batch, c)`, on the tape. Implemented as one constant matmul so the
/// gradient splits evenly across members.
pub fn member_mean(
    tape: &mut Tape,
    y: Var,
    batch: usize,
    members: usize,
) -> Result<Var, DiffError> {
    let mut m = Array2::<f64>::zeros((batch, batch * members));
    let w = 1.0 / members as f64;
    for i in 0..batch {
        for k in 0..members {
            m[[i, k * batch + i]] = w;
        }
    }
    let mv = tape.constant(m.into_dyn());
    tape.matmul(mv, y)
}

/// Plain-array version of [`member_mean`].
pub fn member_mean_array(y: &ArrayView2<f64>, batch: usize, members: usize) -> Array2<f64> {
    assert_eq!(y.shape()[0], batch * members, "tiled row count");
    let cols = y.shape()[1];
    let mut out = Array2::<f64>::zeros((batch, cols));
    for k in 0..members {
        for i in 0..batch {
            for j in 0..cols {
                out[[i, j]] += y[[k * batch + i, j]];
            }
        }
    }
    out / members as f64
}
