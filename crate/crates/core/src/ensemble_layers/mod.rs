//! Layers whose weights are modulated per ensemble member and per
//! hyperparameter value.
//!
//! The zoo, from plain to fully conditioned:
//!
//! * [`PlainDense`] / [`PlainConv2d`]: ordinary affine maps.
//! * [`BatchEnsDense`] / [`BatchEnsConv2d`]: K members share one weight
//!   matrix, each modulating it by a rank-1 pattern `r_k s_k^T`.
//! * [`StnDense`] / [`StnConv2d`]: a single model whose weights shift with
//!   the hyperparameters, `W + Delta * e(lambda)^T`, so one training run
//!   covers a neighborhood of hyperparameter values.
//! * [`HyperBatchDense`] / [`HyperBatchConv2d`]: both at once; member `k`
//!   at hyperparameters `lambda_k` uses
//!   `W*(r_k s_k^T) + [Delta*(u_k v_k^T)] * e(lambda_k)^T`.
//!
//! Every member-aware forward takes one member index and one hyperparameter
//! row per batch row, so a whole ensemble evaluates in a single pass over a
//! tiled minibatch (see [`tiling`]). Nothing ever materializes K weight
//! matrices; the factored forms cost a handful of elementwise products.

pub mod conv;
pub mod dense;
pub mod dropout;
pub mod embed;
pub mod init;
pub mod tiling;

pub use conv::{BatchEnsConv2d, HyperBatchConv2d, PlainConv2d, StnConv2d};
pub use dense::{BatchEnsDense, HyperBatchDense, HyperLayerConfig, PlainDense, StnDense};
pub use dropout::{row_dropout, DropMode};
pub use embed::{EmbedParams, EmbeddingArch, EmbeddingNet, EmbeddingPair};
pub use init::{glorot, glorot_conv, Rank1Init};
pub use tiling::{member_mean, member_mean_array, tile_lambda_rows, tiled_members};

use crate::diffcore::{DiffError, Tape, Var};

/// Failures specific to conditioned layers; graph-level problems pass
/// through from the tape.
#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("layer got {got} input rows but the row context has {want}")]
    RowMismatch { got: usize, want: usize },
    #[error("hyperparameter input has {got} dims, embedding expects {want}")]
    HyperDims { got: usize, want: usize },
    #[error("normalized hyperparameter {value} out of [-1, 1] at row {row}")]
    LambdaOutOfBounds { row: usize, value: f64 },
    #[error("dropout rate {rate} at row {row} outside [0, 0.95]")]
    BadDropoutRate { row: usize, rate: f64 },
}

/// Validates a batch of normalized hyperparameter rows against an embedding
/// input width. Values live in [-1, 1] by construction of the schema
/// normalization; anything outside means the caller skipped projection.
pub(crate) fn check_lambda_rows(
    tape: &Tape,
    z: Var,
    rows: usize,
    want_dims: usize,
) -> Result<(), LayerError> {
    let zv = tape.value(z);
    if zv.ndim() != 2 || zv.shape()[0] != rows {
        return Err(LayerError::RowMismatch {
            got: zv.shape().first().copied().unwrap_or(0),
            want: rows,
        });
    }
    if zv.shape()[1] != want_dims {
        return Err(LayerError::HyperDims {
            got: zv.shape()[1],
            want: want_dims,
        });
    }
    for (i, row) in zv.rows().into_iter().enumerate() {
        for &v in row {
            if v.abs() > 1.0 + 1e-9 {
                return Err(LayerError::LambdaOutOfBounds { row: i, value: v });
            }
        }
    }
    Ok(())
}
