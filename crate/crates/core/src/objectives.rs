//! Losses and regularizers.
//!
//! Training minimizes the mean per-member smoothed cross entropy plus a
//! weight penalty whose strength comes from the hyperparameters themselves.
//! Bound tuning minimizes the ensemble negative log likelihood minus a
//! scaled entropy of the member distributions, with gradients reaching the
//! bounds through the reparametrized hyperparameter samples.
//!
//! The L2 penalty never materializes per-member weight matrices: squared
//! norms of `W_k(lambda)` expand into segment moments of the embedding
//! values (`sum nu`, `sum nu*e`, `sum nu*e^2` per member), which one
//! indicator matmul computes for all members at once.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::diffcore::{DiffError, Tape, Var};
use crate::ensemble_layers::tiling::member_mean;
use crate::ensemble_layers::{HyperBatchConv2d, HyperBatchDense, StnDense};
use crate::hyperdist::MemberDistribution;

/// Probabilities below this are clamped before the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Ensemble NLL with a count of rows whose averaged true-class probability
/// had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleNll {
    pub value: f64,
    pub clamped_rows: usize,
}

/// Cross entropy against `(1-s)*onehot + s/C` targets, one smoothing value
/// per row, averaged over rows.
pub fn smoothed_xent_graph(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    smoothing: &[f64],
) -> Result<Var, DiffError> {
    let shape = tape.value(logits).shape().to_vec();
    assert_eq!(shape.len(), 2, "logits must be (rows, classes)");
    let (n, classes) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "one label per row");
    assert_eq!(smoothing.len(), n, "one smoothing value per row");
    let mut targets = Array2::<f64>::zeros((n, classes));
    for i in 0..n {
        assert!(labels[i] < classes, "label {} out of range", labels[i]);
        let s = smoothing[i];
        assert!((0.0..1.0).contains(&s), "smoothing {s} outside [0,1)");
        for c in 0..classes {
            targets[[i, c]] = s / classes as f64;
        }
        targets[[i, labels[i]]] += 1.0 - s;
    }
    let t = tape.constant(targets.into_dyn());
    let lsm = tape.log_softmax(logits)?;
    let prod = tape.mul(t, lsm)?;
    let total = tape.sum(prod)?;
    let loss = tape.scale(total, -1.0 / n as f64)?;
    Ok(loss)
}

/// Mean per-member training loss on a tiled batch. With equal-size member
/// blocks the member average equals the plain row average, so this is
/// smoothed cross entropy over all tiled rows.
pub fn gibbs_loss_graph(
    tape: &mut Tape,
    tiled_logits: Var,
    tiled_labels: &[usize],
    smoothing: &[f64],
) -> Result<Var, DiffError> {
    smoothed_xent_graph(tape, tiled_logits, tiled_labels, smoothing)
}

/// `-mean log p_ens(y)` where `p_ens` averages the K member blocks of a
/// tiled probability batch; probabilities clamp at [`PROB_CLAMP`] first.
pub fn ensemble_nll_graph(
    tape: &mut Tape,
    tiled_member_probs: Var,
    labels: &[usize],
    batch: usize,
    members: usize,
) -> Result<Var, DiffError> {
    let avg = member_mean(tape, tiled_member_probs, batch, members)?;
    let clamped = tape.clamp_min(avg, PROB_CLAMP)?;
    let logs = tape.ln(clamped)?;
    let picked = tape.select_per_row(logs, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Summed log-uniform entropy of one member's bounds, on the tape:
/// `sum_j 0.5 (la_j + lb_j) + ln(lb_j - la_j)`.
pub fn entropy_graph(tape: &mut Tape, log_lower: Var, log_upper: Var) -> Result<Var, DiffError> {
    let mid = tape.add(log_lower, log_upper)?;
    let mid = tape.scale(mid, 0.5)?;
    let width = tape.sub(log_upper, log_lower)?;
    let lw = tape.ln(width)?;
    let per_dim = tape.add(mid, lw)?;
    tape.sum(per_dim)
}

/// `nll - tau * sum_k H_k` assembled from already-built graph nodes.
pub fn validation_objective_graph(
    tape: &mut Tape,
    ensemble_nll: Var,
    member_entropies: &[Var],
    tau: f64,
) -> Result<Var, DiffError> {
    let mut acc = ensemble_nll;
    for &h in member_entropies {
        let scaled = tape.scale(h, tau)?;
        acc = tape.sub(acc, scaled)?;
    }
    Ok(acc)
}

/// Plain-array smoothed cross entropy, for replay oracles and selection.
pub fn smoothed_xent(logits: ArrayView2<f64>, labels: &[usize], smoothing: &[f64]) -> f64 {
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let s = smoothing[i];
        let mut loss = 0.0;
        for c in 0..classes {
            let t = s / classes as f64 + if c == labels[i] { 1.0 - s } else { 0.0 };
            loss -= t * (row[c] - lse);
        }
        total += loss;
    }
    total / n as f64
}

/// Plain-array Gibbs loss over explicit member logits `(K, b, C)`.
pub fn gibbs_loss(member_logits: ArrayView3<f64>, labels: &[usize], smoothing: &[f64]) -> f64 {
    let members = member_logits.shape()[0];
    let mut total = 0.0;
    for k in 0..members {
        total += smoothed_xent(member_logits.index_axis(ndarray::Axis(0), k), labels, smoothing);
    }
    total / members as f64
}

/// Plain-array ensemble NLL over member probabilities `(K, b, C)`.
pub fn ensemble_nll(member_probs: ArrayView3<f64>, labels: &[usize]) -> EnsembleNll {
    let (members, b, _classes) = (
        member_probs.shape()[0],
        member_probs.shape()[1],
        member_probs.shape()[2],
    );
    assert_eq!(labels.len(), b);
    let mut total = 0.0;
    let mut clamped_rows = 0;
    for i in 0..b {
        let mut p = 0.0;
        for k in 0..members {
            p += member_probs[[k, i, labels[i]]];
        }
        p /= members as f64;
        if p < PROB_CLAMP {
            p = PROB_CLAMP;
            clamped_rows += 1;
        }
        total -= p.ln();
    }
    EnsembleNll {
        value: total / b as f64,
        clamped_rows,
    }
}

/// `ensemble_nll - tau * sum_k entropy(dist_k)` on plain arrays.
pub fn validation_objective(
    member_probs: ArrayView3<f64>,
    labels: &[usize],
    dists: &[MemberDistribution],
    tau: f64,
) -> f64 {
    let nll = ensemble_nll(member_probs, labels).value;
    nll - tau * dists.iter().map(|d| d.entropy()).sum::<f64>()
}

/// Per-row inputs to the L2 penalty of one conditioned layer: the
/// embedding values for every tiled row and the per-row penalty strengths
/// extracted from the sampled hyperparameters.
pub struct L2Inputs<'a> {
    pub member: &'a [usize],
    /// Weight-embedding values `e(z)`, shape `(rows, out)`.
    pub e: Var,
    /// Bias-embedding values `e'(z)`, shape `(rows, out)`.
    pub eb: Var,
    /// Weight penalty strength per row, shape `(rows, 1)`.
    pub nu_w: Var,
    /// Bias penalty strength per row, shape `(rows, 1)`.
    pub nu_b: Var,
}

/// Mean over tiled rows of
/// `nu_i ||W_{k_i}(lambda_i)||^2 + nu'_i ||b_{k_i}(lambda_i)||^2`
/// for a conditioned dense layer.
pub fn l2_hyper_dense(
    tape: &mut Tape,
    vars: &[Var],
    layer: &HyperBatchDense,
    inp: &L2Inputs,
) -> Result<Var, DiffError> {
    let rank1 = if layer.regularize_rank1 {
        Some((vars[layer.r], vars[layer.s], vars[layer.u], vars[layer.v]))
    } else {
        None
    };
    l2_core(
        tape,
        layer.members,
        vars[layer.w],
        vars[layer.delta],
        vars[layer.b],
        vars[layer.delta_b],
        rank1,
        inp,
    )
}

/// Conv counterpart: kernels flatten to `(kh*kw*c_in, c_out)` and the
/// input-channel rank-1 factors replicate across the spatial taps with a
/// constant 0/1 matmul, after which the dense decomposition applies as is.
pub fn l2_hyper_conv(
    tape: &mut Tape,
    vars: &[Var],
    layer: &HyperBatchConv2d,
    inp: &L2Inputs,
) -> Result<Var, DiffError> {
    let flat_rows = layer.kh * layer.kw * layer.c_in;
    let w2d = tape.reshape(vars[layer.w], &[flat_rows, layer.c_out])?;
    let d2d = tape.reshape(vars[layer.delta], &[flat_rows, layer.c_out])?;
    let rank1 = if layer.regularize_rank1 {
        let rep = channel_replicator(tape, layer.kh * layer.kw, layer.c_in);
        let r = tape.matmul(vars[layer.r], rep)?;
        let u = tape.matmul(vars[layer.u], rep)?;
        Some((r, vars[layer.s], u, vars[layer.v]))
    } else {
        None
    };
    l2_core(
        tape,
        layer.members,
        w2d,
        d2d,
        vars[layer.b],
        vars[layer.delta_b],
        rank1,
        inp,
    )
}

/// Single-model variant for the self-tuning dense layer (one member, no
/// rank-1 factors).
pub fn l2_stn_dense(
    tape: &mut Tape,
    vars: &[Var],
    layer: &StnDense,
    inp: &L2Inputs,
) -> Result<Var, DiffError> {
    let b2d = tape.reshape(vars[layer.b], &[1, layer.out_dim])?;
    let db2d = tape.reshape(vars[layer.delta_b], &[1, layer.out_dim])?;
    l2_core(
        tape,
        1,
        vars[layer.w],
        vars[layer.delta],
        b2d,
        db2d,
        None,
        inp,
    )
}

/// `nu * ||W||^2` for an unconditioned parameter block.
pub fn l2_plain(tape: &mut Tape, w: Var, nu: f64) -> Result<Var, DiffError> {
    let w2 = tape.mul(w, w)?;
    let total = tape.sum(w2)?;
    tape.scale(total, nu)
}

/// Shared moment-decomposition core over an effective 2-d weight layout.
///
/// For rows assigned to member k with penalty strengths `nu_i` and
/// embedding rows `e_i`:
///
/// ```text
/// sum_i nu_i ||W_k(e_i)||^2
///   = (sum nu) ||W_k||^2
///   + 2 sum_q [W_k o D_k]_q (sum nu e)_q
///   +   sum_q [D_k^2]_q     (sum nu e^2)_q
/// ```
///
/// where `[M]_q` denotes column sums. The per-member segment sums come from
/// one indicator matmul; everything else broadcasts.
#[allow(clippy::too_many_arguments)]
fn l2_core(
    tape: &mut Tape,
    members: usize,
    w2d: Var,
    delta2d: Var,
    b2d: Var,
    db2d: Var,
    rank1: Option<(Var, Var, Var, Var)>,
    inp: &L2Inputs,
) -> Result<Var, DiffError> {
    let n = inp.member.len();
    assert!(n > 0, "empty row context");
    let in_dim = tape.value(w2d).shape()[0];
    let out_dim = tape.value(w2d).shape()[1];

    let mut ind = Array2::<f64>::zeros((members, n));
    for (i, &k) in inp.member.iter().enumerate() {
        assert!(k < members, "member index {k} out of range");
        ind[[k, i]] = 1.0;
    }
    let ind = tape.constant(ind.into_dyn());

    // Segment sums of nu, nu*e, nu*e^2 (and the e' analogs).
    let s0w = tape.matmul(ind, inp.nu_w)?;
    let nue = tape.mul(inp.nu_w, inp.e)?;
    let s1w = tape.matmul(ind, nue)?;
    let e2 = tape.mul(inp.e, inp.e)?;
    let nue2 = tape.mul(inp.nu_w, e2)?;
    let s2w = tape.matmul(ind, nue2)?;

    let s0b = tape.matmul(ind, inp.nu_b)?;
    let nueb = tape.mul(inp.nu_b, inp.eb)?;
    let s1b = tape.matmul(ind, nueb)?;
    let eb2 = tape.mul(inp.eb, inp.eb)?;
    let nueb2 = tape.mul(inp.nu_b, eb2)?;
    let s2b = tape.matmul(ind, nueb2)?;

    let ones_out = tape.constant(Array2::<f64>::ones((out_dim, 1)).into_dyn());

    let w_sq = tape.mul(w2d, w2d)?;
    let wd = tape.mul(w2d, delta2d)?;
    let d_sq = tape.mul(delta2d, delta2d)?;

    // Column profiles per member, (members, out) or (1, out) broadcastable.
    let (norm_cols, cross_cols, quad_cols) = match rank1 {
        Some((r, s, u, v)) => {
            let r2 = tape.mul(r, r)?;
            let s2 = tape.mul(s, s)?;
            let g = tape.matmul(r2, w_sq)?;
            let norm = tape.mul(g, s2)?;

            let ru = tape.mul(r, u)?;
            let sv = tape.mul(s, v)?;
            let c = tape.matmul(ru, wd)?;
            let cross = tape.mul(c, sv)?;

            let u2 = tape.mul(u, u)?;
            let v2 = tape.mul(v, v)?;
            let q = tape.matmul(u2, d_sq)?;
            let quad = tape.mul(q, v2)?;
            (norm, cross, quad)
        }
        None => {
            let ones_in = tape.constant(Array2::<f64>::ones((1, in_dim)).into_dyn());
            let norm = tape.matmul(ones_in, w_sq)?;
            let cross = tape.matmul(ones_in, wd)?;
            let quad = tape.matmul(ones_in, d_sq)?;
            (norm, cross, quad)
        }
    };

    // Weight terms.
    let norm_rows = tape.matmul(norm_cols, ones_out)?; // (K,1) or (1,1)
    let t1 = tape.mul(norm_rows, s0w)?;
    let t1 = tape.sum(t1)?;
    let t2 = tape.mul(cross_cols, s1w)?;
    let t2 = tape.sum(t2)?;
    let t2 = tape.scale(t2, 2.0)?;
    let t3 = tape.mul(quad_cols, s2w)?;
    let t3 = tape.sum(t3)?;

    // Bias terms; b_k and delta_k are per-member regardless of the flag.
    let b_sq = tape.mul(b2d, b2d)?;
    let b_rows = tape.matmul(b_sq, ones_out)?;
    let t4 = tape.mul(b_rows, s0b)?;
    let t4 = tape.sum(t4)?;
    let bd = tape.mul(b2d, db2d)?;
    let t5 = tape.mul(bd, s1b)?;
    let t5 = tape.sum(t5)?;
    let t5 = tape.scale(t5, 2.0)?;
    let db_sq = tape.mul(db2d, db2d)?;
    let t6 = tape.mul(db_sq, s2b)?;
    let t6 = tape.sum(t6)?;

    let mut total = t1;
    for t in [t2, t3, t4, t5, t6] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / n as f64)
}

/// 0/1 matrix `(c, taps*c)` whose matmul replicates a length-`c` channel
/// vector across `taps` spatial positions in row-major kernel order.
fn channel_replicator(tape: &mut Tape, taps: usize, channels: usize) -> Var {
    let mut t = Array2::<f64>::zeros((channels, taps * channels));
    for j in 0..taps * channels {
        t[[j % channels, j]] = 1.0;
    }
    tape.constant(t.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, stream_rng, ParamStore, Tensor};
    use crate::ensemble_layers::{EmbeddingArch, HyperLayerConfig, Rank1Init};
    use ndarray::{arr1, arr2, Array3};
    use rand::Rng;

    #[test]
    fn xent_fixtures() {
        let mut tape = Tape::new();
        // Confident correct prediction, no smoothing: loss near zero.
        let logits = tape.constant(arr2(&[[20.0, 0.0, 0.0]]).into_dyn());
        let loss = smoothed_xent_graph(&mut tape, logits, &[0], &[0.0]).unwrap();
        assert!(tape.scalar(loss) < 1e-8);

        // Uniform prediction over 4 classes: ln 4.
        let logits = tape.constant(arr2(&[[1.0, 1.0, 1.0, 1.0]]).into_dyn());
        let loss = smoothed_xent_graph(&mut tape, logits, &[2], &[0.0]).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);

        // s=0.2, C=2, p=(0.7, 0.3), label 0: -(0.9 ln 0.7 + 0.1 ln 0.3).
        let logits = tape.constant(arr2(&[[0.7f64.ln(), 0.3f64.ln()]]).into_dyn());
        let loss = smoothed_xent_graph(&mut tape, logits, &[0], &[0.2]).unwrap();
        assert!((tape.scalar(loss) - 0.4414).abs() < 5e-5, "{}", tape.scalar(loss));
    }

    #[test]
    fn array_xent_matches_graph_xent() {
        let mut rng = stream_rng(21, 0, "obj-test");
        let logits = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
        let labels = [0usize, 2, 1, 1, 0];
        let smoothing = [0.0, 0.1, 0.25, 0.0, 0.05];
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone().into_dyn());
        let g = smoothed_xent_graph(&mut tape, lv, &labels, &smoothing).unwrap();
        let a = smoothed_xent(logits.view(), &labels, &smoothing);
        assert!((tape.scalar(g) - a).abs() < 1e-12);
    }

    #[test]
    fn gibbs_is_mean_of_member_losses() {
        let mut rng = stream_rng(21, 1, "obj-test");
        let member_logits = Array3::from_shape_fn((2, 4, 3), |_| rng.random::<f64>() * 2.0);
        let labels = [0usize, 1, 2, 0];
        let smoothing = [0.1; 4];
        let l0 = smoothed_xent(
            member_logits.index_axis(ndarray::Axis(0), 0),
            &labels,
            &smoothing,
        );
        let l1 = smoothed_xent(
            member_logits.index_axis(ndarray::Axis(0), 1),
            &labels,
            &smoothing,
        );
        let g = gibbs_loss(member_logits.view(), &labels, &smoothing);
        assert!((g - 0.5 * (l0 + l1)).abs() < 1e-12);

        // Tiled-graph version: stack the member blocks.
        let tiled = ndarray::concatenate(
            ndarray::Axis(0),
            &[
                member_logits.index_axis(ndarray::Axis(0), 0),
                member_logits.index_axis(ndarray::Axis(0), 1),
            ],
        )
        .unwrap();
        let tiled_labels: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
        let tiled_smoothing = vec![0.1; 8];
        let mut tape = Tape::new();
        let lv = tape.constant(tiled.into_dyn());
        let gg = gibbs_loss_graph(&mut tape, lv, &tiled_labels, &tiled_smoothing).unwrap();
        assert!((tape.scalar(gg) - g).abs() < 1e-12);
    }

    #[test]
    fn ensemble_nll_fixtures() {
        // All members uniform over 10 classes.
        let probs = Array3::from_elem((3, 4, 10), 0.1);
        let out = ensemble_nll(probs.view(), &[0, 5, 9, 2]);
        assert!((out.value - 10.0f64.ln()).abs() < 1e-12);
        assert_eq!(out.clamped_rows, 0);

        // K=1 reduces to the member NLL.
        let p = Array3::from_shape_vec((1, 2, 2), vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let out = ensemble_nll(p.view(), &[0, 1]);
        let want = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((out.value - want).abs() < 1e-12);

        // A zero averaged probability clamps and counts.
        let p = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        let out = ensemble_nll(p.view(), &[0]);
        assert_eq!(out.clamped_rows, 1);
        assert!((out.value - (-PROB_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn graph_ensemble_nll_matches_array_version() {
        let mut rng = stream_rng(21, 2, "obj-test");
        let (members, b, classes) = (3, 4, 5);
        let mut probs = Array3::from_shape_fn((members, b, classes), |_| rng.random::<f64>());
        for k in 0..members {
            for i in 0..b {
                let s: f64 = probs.slice(ndarray::s![k, i, ..]).sum();
                probs.slice_mut(ndarray::s![k, i, ..]).mapv_inplace(|v| v / s);
            }
        }
        let labels = [1usize, 0, 4, 2];
        let want = ensemble_nll(probs.view(), &labels).value;

        let tiled = Array2::from_shape_fn((members * b, classes), |(row, c)| {
            probs[[row / b, row % b, c]]
        });
        let mut tape = Tape::new();
        let pv = tape.constant(tiled.into_dyn());
        let nll = ensemble_nll_graph(&mut tape, pv, &labels, b, members).unwrap();
        assert!((tape.scalar(nll) - want).abs() < 1e-12);
    }

    #[test]
    fn jensen_ensemble_nll_never_exceeds_gibbs_nll() {
        let mut rng = stream_rng(21, 3, "obj-test");
        for _ in 0..50 {
            let (members, b, classes) = (
                rng.random_range(1..4usize),
                rng.random_range(1..6usize),
                rng.random_range(2..5usize),
            );
            let mut probs =
                Array3::from_shape_fn((members, b, classes), |_| rng.random::<f64>() + 1e-3);
            for k in 0..members {
                for i in 0..b {
                    let s: f64 = probs.slice(ndarray::s![k, i, ..]).sum();
                    probs
                        .slice_mut(ndarray::s![k, i, ..])
                        .mapv_inplace(|v| v / s);
                }
            }
            let labels: Vec<usize> =
                (0..b).map(|_| rng.random_range(0..classes)).collect();
            let ens = ensemble_nll(probs.view(), &labels).value;
            let mut gibbs = 0.0;
            for k in 0..members {
                for (i, &y) in labels.iter().enumerate() {
                    gibbs -= probs[[k, i, y]].ln();
                }
            }
            gibbs /= (members * b) as f64;
            assert!(ens <= gibbs + 1e-12, "ens {ens} gibbs {gibbs}");
        }
    }

    #[test]
    fn entropy_graph_matches_closed_form_and_gradient() {
        let d = MemberDistribution::new(vec![0.5, 2.0], vec![4.0, 9.0]).unwrap();
        let mut tape = Tape::new();
        let la = tape.constant(arr1(&[0.5f64.ln(), 2.0f64.ln()]).into_dyn());
        let lb = tape.constant(arr1(&[4.0f64.ln(), 9.0f64.ln()]).into_dyn());
        let h = entropy_graph(&mut tape, la, lb).unwrap();
        assert!((tape.scalar(h) - d.entropy()).abs() < 1e-12);

        // d H / d lb_j = 0.5 + 1 / (lb_j - la_j).
        let report = grad_check(
            |tape, vars| entropy_graph(tape, vars[0], vars[1]),
            &[
                ("la", arr1(&[0.5f64.ln()]).into_dyn()),
                ("lb", arr1(&[4.0f64.ln()]).into_dyn()),
            ],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-6), "rel {}", report.max_rel_err());
    }

    #[test]
    fn validation_objective_decreases_in_tau() {
        let probs = Array3::from_elem((2, 3, 4), 0.25);
        let labels = [0usize, 1, 2];
        let dists = vec![
            MemberDistribution::new(vec![0.1], vec![10.0]).unwrap(),
            MemberDistribution::new(vec![0.5], vec![5.0]).unwrap(),
        ];
        let total_h: f64 = dists.iter().map(|d| d.entropy()).sum();
        assert!(total_h > 0.0);
        let v1 = validation_objective(probs.view(), &labels, &dists, 0.0);
        let v2 = validation_objective(probs.view(), &labels, &dists, 0.01);
        let v3 = validation_objective(probs.view(), &labels, &dists, 0.001);
        assert!(v2 < v3 && v3 < v1);
        assert!((v1 - ensemble_nll(probs.view(), &labels).value).abs() < 1e-12);
    }

    /// Naive oracle: materialize the composed weights row by row.
    #[allow(clippy::too_many_arguments)]
    fn l2_naive(
        w: &Array2<f64>,
        delta: &Array2<f64>,
        b: &Array2<f64>,
        db: &Array2<f64>,
        rank1: Option<(&Array2<f64>, &Array2<f64>, &Array2<f64>, &Array2<f64>)>,
        member: &[usize],
        e: &Array2<f64>,
        eb: &Array2<f64>,
        nu_w: &[f64],
        nu_b: &[f64],
    ) -> f64 {
        let (rows, (p_dim, q_dim)) = (member.len(), w.dim());
        let mut total = 0.0;
        for i in 0..rows {
            let k = member[i];
            let mut wnorm = 0.0;
            for p in 0..p_dim {
                for q in 0..q_dim {
                    let (wf, df) = match rank1 {
                        Some((r, s, u, v)) => {
                            (w[[p, q]] * r[[k, p]] * s[[k, q]], delta[[p, q]] * u[[k, p]] * v[[k, q]])
                        }
                        None => (w[[p, q]], delta[[p, q]]),
                    };
                    let wk = wf + df * e[[i, q]];
                    wnorm += wk * wk;
                }
            }
            let mut bnorm = 0.0;
            for q in 0..q_dim {
                let bk = b[[k, q]] + db[[k, q]] * eb[[i, q]];
                bnorm += bk * bk;
            }
            total += nu_w[i] * wnorm + nu_b[i] * bnorm;
        }
        total / rows as f64
    }

    #[test]
    fn vectorized_l2_matches_naive_loop() {
        let mut rng = stream_rng(21, 4, "obj-test");
        for trial in 0..60 {
            let regularize_rank1 = trial % 2 == 0;
            let members = rng.random_range(1..4usize);
            let in_dim = rng.random_range(1..5usize);
            let out_dim = rng.random_range(1..5usize);
            let rows = rng.random_range(1..9usize);

            let mut store = ParamStore::new();
            let cfg = HyperLayerConfig {
                rank1_init: Rank1Init::Normal { sd: 0.5 },
                delta_init_sd: 0.6,
                embedding: EmbeddingArch::Linear,
                regularize_rank1,
                ..HyperLayerConfig::default()
            };
            let layer = crate::ensemble_layers::HyperBatchDense::new(
                &mut store, "h", in_dim, out_dim, members, 1, &cfg, &mut rng,
            );
            store.value_mut(layer.b).assign(
                &Array2::from_shape_fn((members, out_dim), |_| rng.random::<f64>() - 0.5)
                    .into_dyn(),
            );
            store.value_mut(layer.delta_b).assign(
                &Array2::from_shape_fn((members, out_dim), |_| rng.random::<f64>() - 0.5)
                    .into_dyn(),
            );

            let member: Vec<usize> = (0..rows).map(|_| rng.random_range(0..members)).collect();
            let e = Array2::from_shape_fn((rows, out_dim), |_| rng.random::<f64>() * 2.0 - 1.0);
            let eb = Array2::from_shape_fn((rows, out_dim), |_| rng.random::<f64>() * 2.0 - 1.0);
            let nu_w: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
            let nu_b: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();

            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let ev = tape.constant(e.clone().into_dyn());
            let ebv = tape.constant(eb.clone().into_dyn());
            let nuw = tape.constant(
                Array2::from_shape_fn((rows, 1), |(i, _)| nu_w[i]).into_dyn(),
            );
            let nub = tape.constant(
                Array2::from_shape_fn((rows, 1), |(i, _)| nu_b[i]).into_dyn(),
            );
            let inp = L2Inputs {
                member: &member,
                e: ev,
                eb: ebv,
                nu_w: nuw,
                nu_b: nub,
            };
            let got = l2_hyper_dense(&mut tape, &vars, &layer, &inp).unwrap();
            let got = tape.scalar(got);

            let to2 = |i: usize| {
                store
                    .value(i)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
            };
            let (wv, dv, bv, dbv) = (to2(layer.w), to2(layer.delta), to2(layer.b), to2(layer.delta_b));
            let rank1_vals = regularize_rank1.then(|| {
                (to2(layer.r), to2(layer.s), to2(layer.u), to2(layer.v))
            });
            let want = l2_naive(
                &wv,
                &dv,
                &bv,
                &dbv,
                rank1_vals.as_ref().map(|(r, s, u, v)| (r, s, u, v)),
                &member,
                &e,
                &eb,
                &nu_w,
                &nu_b,
            );
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-10, "trial {trial}: got {got}, want {want}");
        }
    }

    #[test]
    fn l2_collapses_cleanly_in_degenerate_cases() {
        let mut rng = stream_rng(21, 5, "obj-test");
        let mut store = ParamStore::new();
        let cfg = HyperLayerConfig {
            rank1_init: Rank1Init::Normal { sd: 0.5 },
            delta_init_sd: 0.0,
            embedding: EmbeddingArch::Linear,
            regularize_rank1: true,
            ..HyperLayerConfig::default()
        };
        let layer = crate::ensemble_layers::HyperBatchDense::new(
            &mut store, "h", 3, 2, 1, 1, &cfg, &mut rng,
        );
        let rows = 4;
        let e = Array2::<f64>::zeros((rows, 2));
        let member = vec![0usize; rows];
        let nu = 0.37;

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let ev = tape.constant(e.clone().into_dyn());
        let nuv = tape.constant(Array2::from_elem((rows, 1), nu).into_dyn());
        let zero_nu = tape.constant(Array2::<f64>::zeros((rows, 1)).into_dyn());
        let inp = L2Inputs {
            member: &member,
            e: ev,
            eb: ev,
            nu_w: nuv,
            nu_b: zero_nu,
        };
        let got = l2_hyper_dense(&mut tape, &vars, &layer, &inp).unwrap();

        // Delta = 0, one member, constant nu: nu * ||W o (r s^T)||^2.
        let to2 = |i: usize| {
            store
                .value(i)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let (wv, rv, sv) = (to2(layer.w), to2(layer.r), to2(layer.s));
        let mut want = 0.0;
        for p in 0..3 {
            for q in 0..2 {
                let c = wv[[p, q]] * rv[[0, p]] * sv[[0, q]];
                want += c * c;
            }
        }
        want *= nu;
        assert!((tape.scalar(got) - want).abs() < 1e-12 * want.abs().max(1.0));

        // nu = 0 everywhere: exactly zero.
        let inp0 = L2Inputs {
            member: &member,
            e: ev,
            eb: ev,
            nu_w: zero_nu,
            nu_b: zero_nu,
        };
        let zero = l2_hyper_dense(&mut tape, &vars, &layer, &inp0).unwrap();
        assert_eq!(tape.scalar(zero), 0.0);
    }

    #[test]
    fn conv_l2_matches_naive_loop() {
        let mut rng = stream_rng(21, 6, "obj-test");
        for trial in 0..20 {
            let regularize_rank1 = trial % 2 == 0;
            let members = rng.random_range(1..3usize);
            let cfg = HyperLayerConfig {
                rank1_init: Rank1Init::Normal { sd: 0.5 },
                delta_init_sd: 0.5,
                embedding: EmbeddingArch::Linear,
                regularize_rank1,
                ..HyperLayerConfig::default()
            };
            let mut store = ParamStore::new();
            let layer = crate::ensemble_layers::HyperBatchConv2d::new(
                &mut store,
                "h",
                2,
                2,
                2,
                3,
                members,
                crate::diffcore::Padding::Valid,
                1,
                1,
                &cfg,
                &mut rng,
            );
            store.value_mut(layer.b).assign(
                &Array2::from_shape_fn((members, 3), |_| rng.random::<f64>() - 0.5).into_dyn(),
            );
            store.value_mut(layer.delta_b).assign(
                &Array2::from_shape_fn((members, 3), |_| rng.random::<f64>() - 0.5).into_dyn(),
            );

            let rows = rng.random_range(1..6usize);
            let member: Vec<usize> = (0..rows).map(|_| rng.random_range(0..members)).collect();
            let e = Array2::from_shape_fn((rows, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
            let eb = Array2::from_shape_fn((rows, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
            let nu_w: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
            let nu_b: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();

            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let ev = tape.constant(e.clone().into_dyn());
            let ebv = tape.constant(eb.clone().into_dyn());
            let nuw =
                tape.constant(Array2::from_shape_fn((rows, 1), |(i, _)| nu_w[i]).into_dyn());
            let nub =
                tape.constant(Array2::from_shape_fn((rows, 1), |(i, _)| nu_b[i]).into_dyn());
            let inp = L2Inputs {
                member: &member,
                e: ev,
                eb: ebv,
                nu_w: nuw,
                nu_b: nub,
            };
            let got = l2_hyper_conv(&mut tape, &vars, &layer, &inp).unwrap();
            let got = tape.scalar(got);

            // Naive: flatten the kernel to (kh*kw*cin, cout) and expand the
            // channel factors by hand.
            let w4 = store
                .value(layer.w)
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let d4 = store
                .value(layer.delta)
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let to2 = |i: usize| {
                store
                    .value(i)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
            };
            let (rv, sv, uv, vv, bv, dbv) = (
                to2(layer.r),
                to2(layer.s),
                to2(layer.u),
                to2(layer.v),
                to2(layer.b),
                to2(layer.delta_b),
            );
            let mut want = 0.0;
            for i in 0..rows {
                let k = member[i];
                let mut wnorm = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        for ci in 0..2 {
                            for co in 0..3 {
                                let (wf, df) = if regularize_rank1 {
                                    (
                                        w4[[p, q, ci, co]] * rv[[k, ci]] * sv[[k, co]],
                                        d4[[p, q, ci, co]] * uv[[k, ci]] * vv[[k, co]],
                                    )
                                } else {
                                    (w4[[p, q, ci, co]], d4[[p, q, ci, co]])
                                };
                                let wk = wf + df * e[[i, co]];
                                wnorm += wk * wk;
                            }
                        }
                    }
                }
                let mut bnorm = 0.0;
                for co in 0..3 {
                    let bk = bv[[k, co]] + dbv[[k, co]] * eb[[i, co]];
                    bnorm += bk * bk;
                }
                want += nu_w[i] * wnorm + nu_b[i] * bnorm;
            }
            want /= rows as f64;
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-10, "trial {trial}: got {got} want {want}");
        }
    }

    #[test]
    fn bound_gradients_match_common_random_number_differences() {
        // Pathwise gradient of the validation objective with respect to the
        // distribution bounds, against central differences that reuse the
        // same uniform draws.
        let mut rng = stream_rng(21, 7, "obj-test");
        let n = 6;
        let u_draws = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2usize)).collect();
        let (global_lo, global_hi) = (1e-3f64.ln(), 1e3f64.ln());
        let tau = 0.001;

        let mut store = ParamStore::new();
        let stn = StnDense::new(
            &mut store,
            "t",
            2,
            2,
            1,
            EmbeddingArch::Linear,
            0.5,
            &mut rng,
        );
        let crate::ensemble_layers::EmbedParams::Linear { c } = stn.embed.weight.params else {
            unreachable!()
        };
        store
            .value_mut(c)
            .assign(&arr2(&[[0.4, -0.3]]).into_dyn());

        let build = |tape: &mut Tape, vars: &[Var], store: &ParamStore| -> Result<Var, DiffError> {
            // vars[0] = la, vars[1] = lb; model params ride along frozen.
            let frozen = store.bind_frozen(tape);
            let uv = tape.constant(u_draws.clone().into_dyn());
            let width = tape.sub(vars[1], vars[0])?;
            let uw = tape.mul(uv, width)?;
            let ln_lam = tape.add(uw, vars[0])?;
            let zc = tape.add_const(ln_lam, -global_lo)?;
            let zc = tape.scale(zc, 2.0 / (global_hi - global_lo))?;
            let z = tape.add_const(zc, -1.0)?;
            let xv = tape.constant(x.clone().into_dyn());
            let logits = stn
                .forward(tape, &frozen, xv, z)
                .map_err(|e| match e {
                    crate::ensemble_layers::LayerError::Diff(d) => d,
                    other => panic!("unexpected: {other}"),
                })?;
            let probs = tape.softmax(logits)?;
            let nll = ensemble_nll_graph(tape, probs, &labels, n, 1)?;
            let h = entropy_graph(tape, vars[0], vars[1])?;
            validation_objective_graph(tape, nll, &[h], tau)
        };

        let la = arr1(&[0.2f64.ln()]).into_dyn();
        let lb = arr1(&[5.0f64.ln()]).into_dyn();
        let report = grad_check(
            |tape, vars| build(tape, vars, &store),
            &[("la", la), ("lb", lb)],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-3), "rel {}", report.max_rel_err());
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let report = grad_check(
            |tape, vars| smoothed_xent_graph(tape, vars[0], &[0, 2], &[0.1, 0.0]),
            &[(
                "logits",
                arr2(&[[0.5, -0.2, 0.1], [1.0, 0.3, -0.7]]).into_dyn(),
            )],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "rel {}", report.max_rel_err());

        let _ = Tensor::zeros(vec![1]);
    }
}
