//! Dense layers, from plain to member-and-hyperparameter conditioned.
//!
//! Member-aware forwards take one member index per batch row and gather the
//! per-member vectors row-wise, so a tiled minibatch covering all K members
//! runs in a single pass. Hyperparameter-aware forwards additionally take a
//! batch of normalized hyperparameter rows.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::diffcore::{ParamGroup, ParamStore, Tape, Var};

use super::embed::{EmbeddingArch, EmbeddingPair};
use super::init::{glorot, modulation_mat, modulation_vec, Rank1Init};
use super::{check_lambda_rows, LayerError};

/// Knobs shared by the hyper-conditioned layers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperLayerConfig {
    pub rank1_init: Rank1Init,
    /// sd of the modulation init (Delta and delta). Zero starts the layer
    /// exactly at its unconditioned submodel; note that with the embedding
    /// output layer also starting at zero, the pair (Delta, e) sits at a
    /// stationary point of any loss, so bound tuning needs a nonzero value
    /// here to have anything to react to.
    pub delta_init_sd: f64,
    pub embedding: EmbeddingArch,
    /// Reuse r_k, s_k as u_k, v_k instead of separate vectors.
    pub couple_uv_to_rs: bool,
    /// Penalize the composed member weights instead of the shared ones in
    /// the L2 term (consumed by the objective, carried here).
    pub regularize_rank1: bool,
}

impl Default for HyperLayerConfig {
    fn default() -> Self {
        HyperLayerConfig {
            rank1_init: Rank1Init::default(),
            delta_init_sd: 0.0,
            embedding: EmbeddingArch::MlpTanh64,
            couple_uv_to_rs: false,
            regularize_rank1: false,
        }
    }
}

/// `y = x W + b`.
#[derive(Debug, Clone)]
pub struct PlainDense {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PlainDense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot(rng, in_dim, out_dim).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array1::<f64>::zeros(out_dim).into_dyn(),
            ParamGroup::Bias,
        );
        PlainDense { w, b, in_dim, out_dim }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, LayerError> {
        let xw = tape.matmul(x, vars[self.w])?;
        Ok(tape.add(xw, vars[self.b])?)
    }
}

/// K members sharing one weight matrix, member k modulating it by
/// `r_k s_k^T`: `y = [(x * r_k) W] * s_k + b_k`.
#[derive(Debug, Clone)]
pub struct BatchEnsDense {
    pub w: usize,
    pub b: usize,
    pub r: usize,
    pub s: usize,
    pub members: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl BatchEnsDense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        members: usize,
        rank1_init: Rank1Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot(rng, in_dim, out_dim).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array2::<f64>::zeros((members, out_dim)).into_dyn(),
            ParamGroup::Bias,
        );
        let r = store.add(
            format!("{prefix}.r"),
            rank1_init.sample(members, in_dim, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        let s = store.add(
            format!("{prefix}.s"),
            rank1_init.sample(members, out_dim, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        BatchEnsDense { w, b, r, s, members, in_dim, out_dim }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.members * (self.in_dim + 2 * self.out_dim)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        member: &[usize],
    ) -> Result<Var, LayerError> {
        check_member_rows(tape, x, member, 2)?;
        let r = tape.gather_rows(vars[self.r], member)?;
        let s = tape.gather_rows(vars[self.s], member)?;
        let b = tape.gather_rows(vars[self.b], member)?;
        let xr = tape.mul(x, r)?;
        let base = tape.matmul(xr, vars[self.w])?;
        let scaled = tape.mul(base, s)?;
        Ok(tape.add(scaled, b)?)
    }
}

/// Single model whose weights move with the hyperparameters:
/// `y = x [W + Delta * e(z)^T] + b + delta * e'(z)`, evaluated row-wise as
/// `x W + (x Delta) * e(z) + b + delta * e'(z)` so each row can carry its
/// own hyperparameter values.
#[derive(Debug, Clone)]
pub struct StnDense {
    pub w: usize,
    pub b: usize,
    pub delta: usize,
    pub delta_b: usize,
    pub embed: EmbeddingPair,
    pub in_dim: usize,
    pub out_dim: usize,
    pub hyper_dims: usize,
}

impl StnDense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        hyper_dims: usize,
        embedding: EmbeddingArch,
        delta_init_sd: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot(rng, in_dim, out_dim).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array1::<f64>::zeros(out_dim).into_dyn(),
            ParamGroup::Bias,
        );
        let delta = store.add(
            format!("{prefix}.dw"),
            modulation_mat(rng, in_dim, out_dim, delta_init_sd).into_dyn(),
            ParamGroup::Weights,
        );
        let delta_b = store.add(
            format!("{prefix}.db"),
            modulation_vec(rng, out_dim, delta_init_sd).into_dyn(),
            ParamGroup::Bias,
        );
        let embed = EmbeddingPair::new(store, prefix, embedding, hyper_dims, out_dim, rng);
        StnDense { w, b, delta, delta_b, embed, in_dim, out_dim, hyper_dims }
    }

    pub fn num_params(&self) -> usize {
        2 * self.in_dim * self.out_dim + 2 * self.out_dim + self.embed.num_params()
    }

    /// The `(e(z), e'(z))` pair for this layer, for callers that need the
    /// embedding values themselves (the L2 term does).
    pub fn embeddings(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
    ) -> Result<(Var, Var), LayerError> {
        Ok(self.embed.forward(tape, vars, z)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        z: Var,
    ) -> Result<Var, LayerError> {
        let rows = row_count(tape, x, 2)?;
        check_lambda_rows(tape, z, rows, self.hyper_dims)?;
        let (e, eb) = self.embed.forward(tape, vars, z)?;
        let base = tape.matmul(x, vars[self.w])?;
        let xd = tape.matmul(x, vars[self.delta])?;
        let hyper = tape.mul(xd, e)?;
        let bias_mod = tape.mul(vars[self.delta_b], eb)?;
        let y = tape.add(base, hyper)?;
        let y = tape.add(y, vars[self.b])?;
        Ok(tape.add(y, bias_mod)?)
    }
}

/// Member- and hyperparameter-conditioned dense layer:
/// `W_k(z_k) = W * (r_k s_k^T) + [Delta * (u_k v_k^T)] * e(z_k)^T`,
/// `b_k(z_k) = b_k + delta_k * e'(z_k)`, computed in factored row form.
#[derive(Debug, Clone)]
pub struct HyperBatchDense {
    pub w: usize,
    pub delta: usize,
    pub b: usize,
    pub delta_b: usize,
    pub r: usize,
    pub s: usize,
    pub u: usize,
    pub v: usize,
    pub embed: EmbeddingPair,
    pub members: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub hyper_dims: usize,
    pub couple_uv_to_rs: bool,
    pub regularize_rank1: bool,
}

impl HyperBatchDense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        members: usize,
        hyper_dims: usize,
        cfg: &HyperLayerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot(rng, in_dim, out_dim).into_dyn(),
            ParamGroup::Weights,
        );
        let delta = store.add(
            format!("{prefix}.dw"),
            modulation_mat(rng, in_dim, out_dim, cfg.delta_init_sd).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array2::<f64>::zeros((members, out_dim)).into_dyn(),
            ParamGroup::Bias,
        );
        let delta_b = store.add(
            format!("{prefix}.db"),
            modulation_mat(rng, members, out_dim, cfg.delta_init_sd).into_dyn(),
            ParamGroup::Bias,
        );
        let r = store.add(
            format!("{prefix}.r"),
            cfg.rank1_init.sample(members, in_dim, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        let s = store.add(
            format!("{prefix}.s"),
            cfg.rank1_init.sample(members, out_dim, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        let (u, v) = if cfg.couple_uv_to_rs {
            (r, s)
        } else {
            (
                store.add(
                    format!("{prefix}.u"),
                    cfg.rank1_init.sample(members, in_dim, rng).into_dyn(),
                    ParamGroup::Rank1,
                ),
                store.add(
                    format!("{prefix}.v"),
                    cfg.rank1_init.sample(members, out_dim, rng).into_dyn(),
                    ParamGroup::Rank1,
                ),
            )
        };
        let embed = EmbeddingPair::new(store, prefix, cfg.embedding, hyper_dims, out_dim, rng);
        HyperBatchDense {
            w,
            delta,
            b,
            delta_b,
            r,
            s,
            u,
            v,
            embed,
            members,
            in_dim,
            out_dim,
            hyper_dims,
            couple_uv_to_rs: cfg.couple_uv_to_rs,
            regularize_rank1: cfg.regularize_rank1,
        }
    }

    pub fn num_params(&self) -> usize {
        let rank1 = if self.couple_uv_to_rs { 1 } else { 2 };
        2 * self.in_dim * self.out_dim
            + self.members * (rank1 * (self.in_dim + self.out_dim) + 2 * self.out_dim)
            + self.embed.num_params()
    }

    pub fn embeddings(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
    ) -> Result<(Var, Var), LayerError> {
        Ok(self.embed.forward(tape, vars, z)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        member: &[usize],
        z: Var,
    ) -> Result<Var, LayerError> {
        check_member_rows(tape, x, member, 2)?;
        check_lambda_rows(tape, z, member.len(), self.hyper_dims)?;
        let (e, eb) = self.embed.forward(tape, vars, z)?;

        let r = tape.gather_rows(vars[self.r], member)?;
        let s = tape.gather_rows(vars[self.s], member)?;
        let xr = tape.mul(x, r)?;
        let base = tape.matmul(xr, vars[self.w])?;
        let base = tape.mul(base, s)?;

        let u = tape.gather_rows(vars[self.u], member)?;
        let v = tape.gather_rows(vars[self.v], member)?;
        let xu = tape.mul(x, u)?;
        let mods = tape.matmul(xu, vars[self.delta])?;
        let ve = tape.mul(v, e)?;
        let hyper = tape.mul(mods, ve)?;

        let b = tape.gather_rows(vars[self.b], member)?;
        let db = tape.gather_rows(vars[self.delta_b], member)?;
        let bias_mod = tape.mul(db, eb)?;

        let y = tape.add(base, hyper)?;
        let y = tape.add(y, b)?;
        Ok(tape.add(y, bias_mod)?)
    }
}

pub(crate) fn row_count(tape: &Tape, x: Var, want_ndim: usize) -> Result<usize, LayerError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != want_ndim {
        return Err(LayerError::RowMismatch {
            got: shape.first().copied().unwrap_or(0),
            want: 0,
        });
    }
    Ok(shape[0])
}

pub(crate) fn check_member_rows(
    tape: &Tape,
    x: Var,
    member: &[usize],
    want_ndim: usize,
) -> Result<(), LayerError> {
    let rows = row_count(tape, x, want_ndim)?;
    if rows != member.len() {
        return Err(LayerError::RowMismatch {
            got: rows,
            want: member.len(),
        });
    }
    Ok(())
}
