//! Hyperparameter embeddings. Each conditioned layer owns two small nets,
//! `e` for its weight modulation and `e'` for its bias modulation, mapping
//! the normalized hyperparameter row to one value per output unit.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::diffcore::{DiffError, ParamGroup, ParamStore, Tape, Var};

use super::init::glorot;

/// Shape of the embedding net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingArch {
    /// Single matrix, no bias: `e(z) = z C`.
    Linear,
    /// One hidden layer of 64 tanh units.
    MlpTanh64,
}

const MLP_HIDDEN: usize = 64;

/// Parameter slots of one embedding net inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub enum EmbedParams {
    Linear { c: usize },
    Mlp { w1: usize, b1: usize, w2: usize, b2: usize },
}

/// One embedding net. The output layer starts at zero so the modulation it
/// drives contributes nothing until training moves it.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub params: EmbedParams,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl EmbeddingNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        arch: EmbeddingArch,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let params = match arch {
            EmbeddingArch::Linear => EmbedParams::Linear {
                c: store.add(
                    format!("{prefix}.c"),
                    Array2::<f64>::zeros((in_dim, out_dim)).into_dyn(),
                    ParamGroup::Embedding,
                ),
            },
            EmbeddingArch::MlpTanh64 => EmbedParams::Mlp {
                w1: store.add(
                    format!("{prefix}.w1"),
                    glorot(rng, in_dim, MLP_HIDDEN).into_dyn(),
                    ParamGroup::Embedding,
                ),
                b1: store.add(
                    format!("{prefix}.b1"),
                    Array1::<f64>::zeros(MLP_HIDDEN).into_dyn(),
                    ParamGroup::Embedding,
                ),
                w2: store.add(
                    format!("{prefix}.w2"),
                    Array2::<f64>::zeros((MLP_HIDDEN, out_dim)).into_dyn(),
                    ParamGroup::Embedding,
                ),
                b2: store.add(
                    format!("{prefix}.b2"),
                    Array1::<f64>::zeros(out_dim).into_dyn(),
                    ParamGroup::Embedding,
                ),
            },
        };
        EmbeddingNet {
            params,
            in_dim,
            out_dim,
        }
    }

    pub fn arch(&self) -> EmbeddingArch {
        match self.params {
            EmbedParams::Linear { .. } => EmbeddingArch::Linear,
            EmbedParams::Mlp { .. } => EmbeddingArch::MlpTanh64,
        }
    }

    pub fn num_params(&self) -> usize {
        match self.params {
            EmbedParams::Linear { .. } => self.in_dim * self.out_dim,
            EmbedParams::Mlp { .. } => {
                self.in_dim * MLP_HIDDEN + MLP_HIDDEN + MLP_HIDDEN * self.out_dim + self.out_dim
            }
        }
    }

    /// `z` is a batch of normalized hyperparameter rows; output is one
    /// embedding row per input row.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var, DiffError> {
        match self.params {
            EmbedParams::Linear { c } => tape.matmul(z, vars[c]),
            EmbedParams::Mlp { w1, b1, w2, b2 } => {
                let h = tape.matmul(z, vars[w1])?;
                let h = tape.add(h, vars[b1])?;
                let h = tape.tanh(h)?;
                let o = tape.matmul(h, vars[w2])?;
                tape.add(o, vars[b2])
            }
        }
    }
}

/// The `(e, e')` pair owned by one conditioned layer.
#[derive(Debug, Clone)]
pub struct EmbeddingPair {
    pub weight: EmbeddingNet,
    pub bias: EmbeddingNet,
}

impl EmbeddingPair {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        arch: EmbeddingArch,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        EmbeddingPair {
            weight: EmbeddingNet::new(store, &format!("{prefix}.e"), arch, in_dim, out_dim, rng),
            bias: EmbeddingNet::new(store, &format!("{prefix}.eb"), arch, in_dim, out_dim, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.num_params() + self.bias.num_params()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<(Var, Var), DiffError> {
        Ok((
            self.weight.forward(tape, vars, z)?,
            self.bias.forward(tape, vars, z)?,
        ))
    }
}
