//! Convolutional counterparts of the dense layer zoo. The rank-1 member
//! factors live on the channel axes and broadcast along the two spatial
//! dimensions; the factored forward never builds per-member kernels:
//!
//! `y = conv(x * r_k, W) * s_k + conv(x * u_k, Delta) * (v_k * e(z_k)) + b_k(z_k)`

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::diffcore::{Padding, ParamGroup, ParamStore, Tape, Var};

use super::dense::{check_member_rows, row_count, HyperLayerConfig};
use super::embed::{EmbeddingArch, EmbeddingPair};
use super::init::{glorot_conv, modulation_conv, modulation_vec, Rank1Init};
use super::{check_lambda_rows, LayerError};

/// `y = conv(x, W) + b`.
#[derive(Debug, Clone)]
pub struct PlainConv2d {
    pub w: usize,
    pub b: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pad: Padding,
    pub stride: usize,
}

impl PlainConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        pad: Padding,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot_conv(rng, kh, kw, c_in, c_out).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array1::<f64>::zeros(c_out).into_dyn(),
            ParamGroup::Bias,
        );
        PlainConv2d { w, b, kh, kw, c_in, c_out, pad, stride }
    }

    pub fn num_params(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out + self.c_out
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, LayerError> {
        let y = tape.conv2d(x, vars[self.w], self.pad, self.stride)?;
        Ok(tape.add(y, vars[self.b])?)
    }
}

/// Batch-ensemble convolution: member k modulates input channels by `r_k`
/// and output channels by `s_k`.
#[derive(Debug, Clone)]
pub struct BatchEnsConv2d {
    pub w: usize,
    pub b: usize,
    pub r: usize,
    pub s: usize,
    pub members: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pad: Padding,
    pub stride: usize,
}

impl BatchEnsConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        members: usize,
        pad: Padding,
        stride: usize,
        rank1_init: Rank1Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot_conv(rng, kh, kw, c_in, c_out).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array2::<f64>::zeros((members, c_out)).into_dyn(),
            ParamGroup::Bias,
        );
        let r = store.add(
            format!("{prefix}.r"),
            rank1_init.sample(members, c_in, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        let s = store.add(
            format!("{prefix}.s"),
            rank1_init.sample(members, c_out, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        BatchEnsConv2d { w, b, r, s, members, kh, kw, c_in, c_out, pad, stride }
    }

    pub fn num_params(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
            + self.members * (self.c_in + 2 * self.c_out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        member: &[usize],
    ) -> Result<Var, LayerError> {
        check_member_rows(tape, x, member, 4)?;
        let r = gather_channels(tape, vars[self.r], member, self.c_in)?;
        let s = gather_channels(tape, vars[self.s], member, self.c_out)?;
        let b = gather_channels(tape, vars[self.b], member, self.c_out)?;
        let xr = tape.mul(x, r)?;
        let base = tape.conv2d(xr, vars[self.w], self.pad, self.stride)?;
        let scaled = tape.mul(base, s)?;
        Ok(tape.add(scaled, b)?)
    }
}

/// Self-tuning convolution: `K(z) = W + Delta * e(z)` with the embedding
/// broadcast over the spatial and input-channel axes.
#[derive(Debug, Clone)]
pub struct StnConv2d {
    pub w: usize,
    pub b: usize,
    pub delta: usize,
    pub delta_b: usize,
    pub embed: EmbeddingPair,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pad: Padding,
    pub stride: usize,
    pub hyper_dims: usize,
}

impl StnConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        pad: Padding,
        stride: usize,
        hyper_dims: usize,
        embedding: EmbeddingArch,
        delta_init_sd: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot_conv(rng, kh, kw, c_in, c_out).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array1::<f64>::zeros(c_out).into_dyn(),
            ParamGroup::Bias,
        );
        let delta = store.add(
            format!("{prefix}.dw"),
            modulation_conv(rng, kh, kw, c_in, c_out, delta_init_sd).into_dyn(),
            ParamGroup::Weights,
        );
        let delta_b = store.add(
            format!("{prefix}.db"),
            modulation_vec(rng, c_out, delta_init_sd).into_dyn(),
            ParamGroup::Bias,
        );
        let embed = EmbeddingPair::new(store, prefix, embedding, hyper_dims, c_out, rng);
        StnConv2d { w, b, delta, delta_b, embed, kh, kw, c_in, c_out, pad, stride, hyper_dims }
    }

    pub fn num_params(&self) -> usize {
        2 * self.kh * self.kw * self.c_in * self.c_out + 2 * self.c_out + self.embed.num_params()
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
        z: Var,
    ) -> Result<Var, LayerError> {
        let rows = row_count(tape, x, 4)?;
        check_lambda_rows(tape, z, rows, self.hyper_dims)?;
        let (e, eb) = self.embed.forward(tape, vars, z)?;
        let e = to_channel_shape(tape, e, rows, self.c_out)?;
        let eb = to_channel_shape(tape, eb, rows, self.c_out)?;

        let base = tape.conv2d(x, vars[self.w], self.pad, self.stride)?;
        let mods = tape.conv2d(x, vars[self.delta], self.pad, self.stride)?;
        let hyper = tape.mul(mods, e)?;
        let bias_mod = tape.mul(vars[self.delta_b], eb)?;

        let y = tape.add(base, hyper)?;
        let y = tape.add(y, vars[self.b])?;
        Ok(tape.add(y, bias_mod)?)
    }
}

/// Member- and hyperparameter-conditioned convolution.
#[derive(Debug, Clone)]
pub struct HyperBatchConv2d {
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
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pad: Padding,
    pub stride: usize,
    pub hyper_dims: usize,
    pub couple_uv_to_rs: bool,
    pub regularize_rank1: bool,
}

impl HyperBatchConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        members: usize,
        pad: Padding,
        stride: usize,
        hyper_dims: usize,
        cfg: &HyperLayerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            glorot_conv(rng, kh, kw, c_in, c_out).into_dyn(),
            ParamGroup::Weights,
        );
        let delta = store.add(
            format!("{prefix}.dw"),
            modulation_conv(rng, kh, kw, c_in, c_out, cfg.delta_init_sd).into_dyn(),
            ParamGroup::Weights,
        );
        let b = store.add(
            format!("{prefix}.b"),
            Array2::<f64>::zeros((members, c_out)).into_dyn(),
            ParamGroup::Bias,
        );
        let delta_b = store.add(
            format!("{prefix}.db"),
            super::init::modulation_mat(rng, members, c_out, cfg.delta_init_sd).into_dyn(),
            ParamGroup::Bias,
        );
        let r = store.add(
            format!("{prefix}.r"),
            cfg.rank1_init.sample(members, c_in, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        let s = store.add(
            format!("{prefix}.s"),
            cfg.rank1_init.sample(members, c_out, rng).into_dyn(),
            ParamGroup::Rank1,
        );
        let (u, v) = if cfg.couple_uv_to_rs {
            (r, s)
        } else {
            (
                store.add(
                    format!("{prefix}.u"),
                    cfg.rank1_init.sample(members, c_in, rng).into_dyn(),
                    ParamGroup::Rank1,
                ),
                store.add(
                    format!("{prefix}.v"),
                    cfg.rank1_init.sample(members, c_out, rng).into_dyn(),
                    ParamGroup::Rank1,
                ),
            )
        };
        let embed = EmbeddingPair::new(store, prefix, cfg.embedding, hyper_dims, c_out, rng);
        HyperBatchConv2d {
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
            kh,
            kw,
            c_in,
            c_out,
            pad,
            stride,
            hyper_dims,
            couple_uv_to_rs: cfg.couple_uv_to_rs,
            regularize_rank1: cfg.regularize_rank1,
        }
    }

    pub fn num_params(&self) -> usize {
        let rank1 = if self.couple_uv_to_rs { 1 } else { 2 };
        2 * self.kh * self.kw * self.c_in * self.c_out
            + self.members * (rank1 * (self.c_in + self.c_out) + 2 * self.c_out)
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
        check_member_rows(tape, x, member, 4)?;
        check_lambda_rows(tape, z, member.len(), self.hyper_dims)?;
        let rows = member.len();
        let (e, eb) = self.embed.forward(tape, vars, z)?;

        let r = gather_channels(tape, vars[self.r], member, self.c_in)?;
        let s = gather_channels(tape, vars[self.s], member, self.c_out)?;
        let xr = tape.mul(x, r)?;
        let base = tape.conv2d(xr, vars[self.w], self.pad, self.stride)?;
        let base = tape.mul(base, s)?;

        let u = gather_channels(tape, vars[self.u], member, self.c_in)?;
        let v = tape.gather_rows(vars[self.v], member)?;
        let xu = tape.mul(x, u)?;
        let mods = tape.conv2d(xu, vars[self.delta], self.pad, self.stride)?;
        let ve = tape.mul(v, e)?;
        let ve = to_channel_shape(tape, ve, rows, self.c_out)?;
        let hyper = tape.mul(mods, ve)?;

        let b = gather_channels(tape, vars[self.b], member, self.c_out)?;
        let db = tape.gather_rows(vars[self.delta_b], member)?;
        let bias_mod = tape.mul(db, eb)?;
        let bias_mod = to_channel_shape(tape, bias_mod, rows, self.c_out)?;

        let y = tape.add(base, hyper)?;
        let y = tape.add(y, b)?;
        Ok(tape.add(y, bias_mod)?)
    }
}

/// Gathers per-member channel vectors and shapes them `(rows, 1, 1, c)` so
/// they broadcast over the spatial axes of an image batch.
fn gather_channels(
    tape: &mut Tape,
    param: Var,
    member: &[usize],
    channels: usize,
) -> Result<Var, LayerError> {
    let g = tape.gather_rows(param, member)?;
    Ok(tape.reshape(g, &[member.len(), 1, 1, channels])?)
}

fn to_channel_shape(
    tape: &mut Tape,
    v: Var,
    rows: usize,
    channels: usize,
) -> Result<Var, LayerError> {
    Ok(tape.reshape(v, &[rows, 1, 1, channels])?)
}
