//! The two training loops.
//!
//! Both loops share the batch-order stream and the per-layer init streams,
//! so a one-member fit whose distributions are frozen at a point walks the
//! same batches with the same starting weights as [`train_fixed`] under
//! that point. Divergence surfaces as graph-building or gradient errors
//! (every op rejects non-finite values) and is folded into
//! [`FitStatus::Diverged`] rather than crashing: hyperparameter searches
//! must survive bad draws.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::datastore::split_indices;
use crate::diffcore::{
    stream_rng, DiffError, OptimizerState, ParamGroup, ParamStore, Tape, Tensor, Var,
};
use crate::ensemble_layers::{member_mean, tiled_members, DropMode};
use crate::hyperdist::{HyperSchema, MemberDistribution};
use crate::objectives::{
    ensemble_nll, ensemble_nll_graph, entropy_graph, smoothed_xent_graph,
    validation_objective_graph,
};

use super::net::{build_network, ForwardCtx, Network};
use super::{
    BoundLogRow, EpochStats, FitStatus, GroupScales, LambdaSummary, LossConfig, LossKind,
    ModelSpec, StepCounts, TaskData, Targets, TrainError, TrainPlan, TrainedModel,
};

/// One weight step of the alternating fit: the loss that was minimized and
/// the hyperparameters drawn for it.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    /// `(members * batch, dims)` sampled values, one row per tiled batch row
    /// in member-major order (rows `k*batch..(k+1)*batch` belong to member `k`).
    pub lambda: Array2<f64>,
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Diff(DiffError::NonFinite { .. })
            | TrainError::Diff(DiffError::NonFiniteGrad { .. })
    )
}

fn check_lambda(schema: &HyperSchema, lambda: &[f64]) -> Result<(), TrainError> {
    if lambda.len() != schema.len() {
        return Err(TrainError::ShapeMismatch {
            what: "lambda dims",
            got: lambda.len(),
            want: schema.len(),
        });
    }
    for (j, e) in schema.entries().iter().enumerate() {
        let v = lambda[j];
        if !(v.is_finite() && v >= e.lower && v <= e.upper) {
            return Err(TrainError::LambdaOutOfBounds {
                dim: j,
                value: v,
                lower: e.lower,
                upper: e.upper,
            });
        }
    }
    Ok(())
}

pub(crate) fn check_data(spec: &ModelSpec, loss: &LossConfig, data: &TaskData) -> Result<(), TrainError> {
    if data.features.ncols() != spec.in_dim {
        return Err(TrainError::ShapeMismatch {
            what: "feature columns",
            got: data.features.ncols(),
            want: spec.in_dim,
        });
    }
    if data.out_dim() != spec.out_dim {
        return Err(TrainError::ShapeMismatch {
            what: "target width",
            got: data.out_dim(),
            want: spec.out_dim,
        });
    }
    let matched = matches!(
        (&data.targets, loss.kind),
        (Targets::Classes { .. }, LossKind::CrossEntropy)
            | (Targets::Values(_), LossKind::SquaredError)
    );
    if !matched {
        return Err(TrainError::BadPlan("loss kind does not match target type"));
    }
    if data.len() < 2 {
        return Err(TrainError::BadPlan("need at least two rows to split"));
    }
    Ok(())
}

fn scale_vec(store: &ParamStore, scales: &GroupScales) -> Vec<f64> {
    (0..store.len()).map(|i| scales.of(store.group(i))).collect()
}

fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn feature_rows(data: &TaskData, idx: &[usize]) -> Array2<f64> {
    data.features.select(Axis(0), idx)
}

fn label_rows(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Repeats the whole row block `k` times, matching the tiled layout.
fn tile_target_rows(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (n, c) = a.dim();
    Array2::from_shape_fn((k * n, c), |(row, j)| a[[row % n, j]])
}

/// Mean over rows of the squared-error row sums.
fn mse_graph(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, DiffError> {
    let rows = tape.value(pred).shape()[0];
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / rows as f64)
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Eval-mode loss and predictions on a row subset. Classification scores
/// the averaged probabilities by NLL; regression by mean squared error.
fn eval_split(
    net: &Network,
    store: &ParamStore,
    schema: &HyperSchema,
    lambdas: Option<ndarray::ArrayView2<f64>>,
    data: &TaskData,
    idx: &[usize],
) -> Result<(f64, Array2<f64>), TrainError> {
    let feats = feature_rows(data, idx);
    let pred = net.predict(store, schema, feats.view(), lambdas)?;
    let loss = match &data.targets {
        Targets::Classes { labels, .. } => {
            let base = label_rows(labels, idx);
            ensemble_nll(pred.view().insert_axis(Axis(0)), &base).value
        }
        Targets::Values(v) => {
            let t = v.select(Axis(0), idx);
            let d = &pred - &t;
            d.iter().map(|x| x * x).sum::<f64>() / idx.len() as f64
        }
    };
    Ok((loss, pred))
}

fn log_bounds(
    out: &mut Vec<BoundLogRow>,
    epoch: usize,
    dists: &[MemberDistribution],
    schema: &HyperSchema,
) {
    for (k, d) in dists.iter().enumerate() {
        let (lo, hi, mean) = (d.lower(), d.upper(), d.mean());
        for (j, e) in schema.entries().iter().enumerate() {
            out.push(BoundLogRow {
                epoch,
                member: k,
                hyper_name: e.name.clone(),
                lower: lo[j],
                upper: hi[j],
                mean: mean[j],
            });
        }
    }
}

/// Minimizes the regularized loss of a plain model under one fixed
/// hyperparameter vector. The vector must sit inside the schema bounds; it
/// feeds penalty strengths, the dropout rate, and label smoothing.
pub fn train_fixed(
    spec: &ModelSpec,
    schema: &HyperSchema,
    lambda: &[f64],
    plan: &TrainPlan,
    loss: &LossConfig,
    data: &TaskData,
) -> Result<TrainedModel, TrainError> {
    plan.validate()?;
    loss.validate()?;
    check_lambda(schema, lambda)?;
    check_data(spec, loss, data)?;
    let (train_idx, val_idx) = split_indices(data.len(), plan.split, plan.split_seed());
    let (mut store, net) = build_network(spec, schema, loss.kind, None, plan.seed)?;
    let mut opt = OptimizerState::new(plan.param_opt, &store);
    let scales = scale_vec(&store, &plan.scales);
    let drop_rate = net.map.dropout_dim.map(|j| lambda[j]);
    let smooth = net.map.smoothing_dim.map_or(loss.label_smoothing, |j| lambda[j]);

    let mut history = Vec::new();
    let mut steps = StepCounts::default();
    let mut final_pred = None;
    let mut status = FitStatus::Ok;
    'epochs: for epoch in 1..=plan.epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut stream_rng(plan.seed, epoch as u64, "batches"));
        let mut step_rng = stream_rng(plan.seed, epoch as u64, "train-steps");
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            let step = fixed_step(
                &net, &mut store, &mut opt, &scales, lambda, drop_rate, smooth, loss, data,
                chunk, &mut step_rng,
            );
            match step {
                Ok(l) => {
                    steps.train += 1;
                    batch_losses.push(l);
                }
                Err(e) if is_divergence(&e) => {
                    status = FitStatus::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        match eval_split(&net, &store, schema, None, data, &val_idx) {
            Ok((val_loss, pred)) => {
                final_pred = Some(pred);
                history.push(EpochStats {
                    epoch,
                    train_loss: mean_of(&batch_losses),
                    val_loss,
                });
            }
            Err(e) if is_divergence(&e) => {
                status = FitStatus::Diverged { epoch };
                break 'epochs;
            }
            Err(e) => return Err(e),
        }
    }
    let ok = status == FitStatus::Ok;
    Ok(TrainedModel {
        status,
        net,
        store,
        dists: None,
        lambda: LambdaSummary::Fixed(lambda.to_vec()),
        history,
        bound_log: Vec::new(),
        steps,
        val_predictions: if ok { final_pred } else { None },
    })
}

#[allow(clippy::too_many_arguments)]
fn fixed_step(
    net: &Network,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    scales: &[f64],
    lambda: &[f64],
    drop_rate: Option<f64>,
    smooth: f64,
    loss: &LossConfig,
    data: &TaskData,
    idx: &[usize],
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    let n = idx.len();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let x = tape.constant(feature_rows(data, idx).into_dyn());
    let rates;
    let dropout = match drop_rate {
        Some(r) => {
            rates = vec![r; n];
            Some(rates.as_slice())
        }
        None => None,
    };
    let ctx = ForwardCtx {
        member: &[],
        z: None,
        mode: DropMode::Train,
        dropout,
    };
    let out = net.forward(&mut tape, &vars, x, &ctx, rng)?;
    let data_term = match (&data.targets, loss.kind) {
        (Targets::Classes { labels, .. }, LossKind::CrossEntropy) => {
            let base = label_rows(labels, idx);
            smoothed_xent_graph(&mut tape, out, &base, &vec![smooth; n])?
        }
        (Targets::Values(v), LossKind::SquaredError) => {
            let t = tape.constant(v.select(Axis(0), idx).into_dyn());
            mse_graph(&mut tape, out, t)?
        }
        _ => return Err(TrainError::BadPlan("loss kind does not match target type")),
    };
    let total = match net.l2_graph_fixed(&mut tape, &vars, lambda)? {
        Some(p) => tape.add(data_term, p)?,
        None => data_term,
    };
    let value = tape.scalar(total);
    let g = tape.backward(total)?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.get(v).cloned()).collect();
    opt.step(store, &grads, scales)?;
    Ok(value)
}

/// In-flight state of the alternating fit: the conditioned model, its
/// optimizer, and each member's log-space bounds with theirs.
pub struct FitState {
    net: Network,
    store: ParamStore,
    bounds: ParamStore,
    lo: usize,
    hi: usize,
    schema: HyperSchema,
    loss: LossConfig,
    opt_p: OptimizerState,
    opt_b: OptimizerState,
    param_scales: Vec<f64>,
}

impl FitState {
    pub fn new(
        spec: &ModelSpec,
        schema: &HyperSchema,
        members: usize,
        plan: &TrainPlan,
        loss: &LossConfig,
        init: Option<Vec<MemberDistribution>>,
    ) -> Result<Self, TrainError> {
        plan.validate()?;
        loss.validate()?;
        if members == 0 {
            return Err(TrainError::BadPlan("member count must be >= 1"));
        }
        let dists = match init {
            Some(d) => {
                if d.len() != members {
                    return Err(TrainError::ShapeMismatch {
                        what: "initial distributions",
                        got: d.len(),
                        want: members,
                    });
                }
                if let Some(bad) = d.iter().find(|x| x.dims() != schema.len()) {
                    return Err(TrainError::ShapeMismatch {
                        what: "distribution dims",
                        got: bad.dims(),
                        want: schema.len(),
                    });
                }
                // Re-projection is the identity on feasible bounds and
                // repairs anything hand-built outside the schema range.
                d.iter()
                    .map(|x| MemberDistribution::from_log_bounds(x.log_lower(), x.log_upper(), schema))
                    .collect()
            }
            None => vec![MemberDistribution::full(schema); members],
        };
        let (store, net) = build_network(spec, schema, loss.kind, Some(members), plan.seed)?;
        let m = schema.len();
        let mut lo = Array2::zeros((members, m));
        let mut hi = Array2::zeros((members, m));
        for (k, d) in dists.iter().enumerate() {
            for j in 0..m {
                lo[[k, j]] = d.log_lower()[j];
                hi[[k, j]] = d.log_upper()[j];
            }
        }
        let mut bounds = ParamStore::new();
        let lo = bounds.add("bounds.log_lower", lo.into_dyn(), ParamGroup::Bounds);
        let hi = bounds.add("bounds.log_upper", hi.into_dyn(), ParamGroup::Bounds);
        let opt_p = OptimizerState::new(plan.param_opt, &store);
        let opt_b = OptimizerState::new(plan.bound_opt, &bounds);
        let param_scales = scale_vec(&store, &plan.scales);
        Ok(FitState {
            net,
            store,
            bounds,
            lo,
            hi,
            schema: schema.clone(),
            loss: *loss,
            opt_p,
            opt_b,
            param_scales,
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access to the conditioned parameters, for warm starts.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Current member distributions read back from the bound tensors.
    pub fn dists(&self) -> Vec<MemberDistribution> {
        let m = self.schema.len();
        (0..self.net.members)
            .map(|k| {
                let lo: Vec<f64> = (0..m).map(|j| self.bounds.value(self.lo)[[k, j]]).collect();
                let hi: Vec<f64> = (0..m).map(|j| self.bounds.value(self.hi)[[k, j]]).collect();
                MemberDistribution::from_log_bounds(&lo, &hi, &self.schema)
            })
            .collect()
    }

    /// One weight update on a training batch: every tiled row draws its own
    /// hyperparameter vector from the owning member's distribution, and the
    /// mean smoothed loss plus the sampled-strength penalty is minimized over
    /// the conditioned parameters. Bounds stay frozen here.
    pub fn train_step(
        &mut self,
        data: &TaskData,
        idx: &[usize],
        rng: &mut impl Rng,
    ) -> Result<StepReport, TrainError> {
        let n = idx.len();
        let k = self.net.members;
        let m = self.schema.len();
        let mut lambda = Array2::zeros((k * n, m));
        for (kk, d) in self.dists().iter().enumerate() {
            let draw = d.sample_batch(n, rng);
            lambda
                .slice_mut(s![kk * n..(kk + 1) * n, ..])
                .assign(&draw.values);
        }
        let mut z_rows = Array2::zeros((k * n, m));
        for row in 0..k * n {
            let z = self.schema.normalize(&lambda.row(row).to_vec());
            for (j, v) in z.into_iter().enumerate() {
                z_rows[[row, j]] = v;
            }
        }
        let member = tiled_members(n, k);
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let x0 = tape.constant(feature_rows(data, idx).into_dyn());
        let x = tape.tile_rows(x0, k)?;
        let z = tape.constant(z_rows.into_dyn());
        let rates;
        let dropout = match self.net.map.dropout_dim {
            Some(j) => {
                rates = lambda.column(j).to_vec();
                Some(rates.as_slice())
            }
            None => None,
        };
        let ctx = ForwardCtx {
            member: &member,
            z: Some(z),
            mode: DropMode::Train,
            dropout,
        };
        let out = self.net.forward(&mut tape, &vars, x, &ctx, rng)?;
        let data_term = match (&data.targets, self.loss.kind) {
            (Targets::Classes { labels, .. }, LossKind::CrossEntropy) => {
                let base = label_rows(labels, idx);
                let mut tiled = Vec::with_capacity(k * n);
                for _ in 0..k {
                    tiled.extend_from_slice(&base);
                }
                let smoothing: Vec<f64> = match self.net.map.smoothing_dim {
                    Some(j) => lambda.column(j).to_vec(),
                    None => vec![self.loss.label_smoothing; k * n],
                };
                smoothed_xent_graph(&mut tape, out, &tiled, &smoothing)?
            }
            (Targets::Values(v), LossKind::SquaredError) => {
                let base = v.select(Axis(0), idx);
                let t = tape.constant(tile_target_rows(&base, k).into_dyn());
                mse_graph(&mut tape, out, t)?
            }
            _ => return Err(TrainError::BadPlan("loss kind does not match target type")),
        };
        let total = match self
            .net
            .l2_graph_hyper(&mut tape, &vars, z, &member, lambda.view())?
        {
            Some(p) => tape.add(data_term, p)?,
            None => data_term,
        };
        let value = tape.scalar(total);
        let g = tape.backward(total)?;
        let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.get(v).cloned()).collect();
        self.opt_p.step(&mut self.store, &grads, &self.param_scales)?;
        Ok(StepReport {
            loss: value,
            lambda,
        })
    }

    /// One bound update on a validation batch. Hyperparameters are redrawn
    /// per tiled row with the reparametrization `exp(a + u(b-a))`, so the
    /// validation objective differentiates through the bounds; weights stay
    /// frozen. Afterwards each member's bounds are projected back into
    /// feasibility. Returns the objective value before the update.
    pub fn tune_step(
        &mut self,
        data: &TaskData,
        idx: &[usize],
        rng: &mut impl Rng,
    ) -> Result<f64, TrainError> {
        let n = idx.len();
        let k = self.net.members;
        let m = self.schema.len();
        let rows = k * n;
        let member = tiled_members(n, k);
        let mut u = Array2::zeros((rows, m));
        for i in 0..rows {
            for j in 0..m {
                u[[i, j]] = rng.random::<f64>();
            }
        }
        let lo_v = self.bounds.value(self.lo).clone();
        let hi_v = self.bounds.value(self.hi).clone();

        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let bvars = self.bounds.bind(&mut tape);
        let (blo, bhi) = (bvars[self.lo], bvars[self.hi]);
        let la = tape.gather_rows(blo, &member)?;
        let lb = tape.gather_rows(bhi, &member)?;
        let width = tape.sub(lb, la)?;
        let uc = tape.constant(u.clone().into_dyn());
        let jitter = tape.mul(uc, width)?;
        let log_lambda = tape.add(la, jitter)?;
        // Normalize against the schema's global log range, as in sampling.
        let ga = Array1::from_iter(self.schema.entries().iter().map(|e| e.lower.ln()));
        let sc = Array1::from_iter(
            self.schema
                .entries()
                .iter()
                .map(|e| 2.0 / (e.upper.ln() - e.lower.ln())),
        );
        let ga_c = tape.constant(ga.into_dyn());
        let sc_c = tape.constant(sc.into_dyn());
        let centered = tape.sub(log_lambda, ga_c)?;
        let scaled = tape.mul(centered, sc_c)?;
        let z = tape.add_const(scaled, -1.0)?;

        let rates;
        let dropout = match self.net.map.dropout_dim {
            Some(j) => {
                let mut r = vec![0.0; rows];
                for (row, &kk) in member.iter().enumerate() {
                    let a = lo_v[[kk, j]];
                    let b = hi_v[[kk, j]];
                    r[row] = (a + u[[row, j]] * (b - a)).exp();
                }
                rates = r;
                Some(rates.as_slice())
            }
            None => None,
        };
        let x0 = tape.constant(feature_rows(data, idx).into_dyn());
        let x = tape.tile_rows(x0, k)?;
        let ctx = ForwardCtx {
            member: &member,
            z: Some(z),
            mode: DropMode::Train,
            dropout,
        };
        let out = self.net.forward(&mut tape, &vars, x, &ctx, rng)?;
        let fit_term = match (&data.targets, self.loss.kind) {
            (Targets::Classes { labels, .. }, LossKind::CrossEntropy) => {
                let base = label_rows(labels, idx);
                let probs = tape.softmax(out)?;
                ensemble_nll_graph(&mut tape, probs, &base, n, k)?
            }
            (Targets::Values(v), LossKind::SquaredError) => {
                let pred = member_mean(&mut tape, out, n, k)?;
                let t = tape.constant(v.select(Axis(0), idx).into_dyn());
                mse_graph(&mut tape, pred, t)?
            }
            _ => return Err(TrainError::BadPlan("loss kind does not match target type")),
        };
        let h = entropy_graph(&mut tape, blo, bhi)?;
        let obj = validation_objective_graph(&mut tape, fit_term, &[h], self.loss.tau)?;
        let value = tape.scalar(obj);
        let g = tape.backward(obj)?;
        let grads: Vec<Option<Tensor>> = bvars.iter().map(|&v| g.get(v).cloned()).collect();
        self.opt_b.step(&mut self.bounds, &grads, &[1.0, 1.0])?;
        self.project();
        Ok(value)
    }

    /// Clamps every member's bounds back into the feasible set; identity
    /// when a gradient step kept them ordered and inside the schema range.
    fn project(&mut self) {
        let m = self.schema.len();
        for k in 0..self.net.members {
            let lo: Vec<f64> = (0..m).map(|j| self.bounds.value(self.lo)[[k, j]]).collect();
            let hi: Vec<f64> = (0..m).map(|j| self.bounds.value(self.hi)[[k, j]]).collect();
            let d = MemberDistribution::from_log_bounds(&lo, &hi, &self.schema);
            for j in 0..m {
                self.bounds.value_mut(self.lo)[[k, j]] = d.log_lower()[j];
                self.bounds.value_mut(self.hi)[[k, j]] = d.log_upper()[j];
            }
        }
    }

    fn member_means(&self) -> Array2<f64> {
        let dists = self.dists();
        let mut means = Array2::zeros((self.net.members, self.schema.len()));
        for (k, d) in dists.iter().enumerate() {
            means.row_mut(k).assign(&Array1::from(d.mean()));
        }
        means
    }

    fn eval_split(&self, data: &TaskData, idx: &[usize]) -> Result<(f64, Array2<f64>), TrainError> {
        let means = self.member_means();
        eval_split(
            &self.net,
            &self.store,
            &self.schema,
            Some(means.view()),
            data,
            idx,
        )
    }
}

/// Trains a member-conditioned model while tuning each member's bounds.
///
/// Weight steps walk the training split in shuffled batches. After
/// `warmup_epochs` full epochs, every `train_steps_per_tune`-th weight step
/// is followed by one bound step on the next cyclic validation batch; the
/// step cadence carries across epoch boundaries. `init` of `None` starts
/// every member at the full schema range.
pub fn fit_hyper_batch(
    spec: &ModelSpec,
    schema: &HyperSchema,
    members: usize,
    plan: &TrainPlan,
    loss: &LossConfig,
    data: &TaskData,
    init: Option<Vec<MemberDistribution>>,
) -> Result<TrainedModel, TrainError> {
    check_data(spec, loss, data)?;
    let mut state = FitState::new(spec, schema, members, plan, loss, init)?;
    let (train_idx, val_idx) = split_indices(data.len(), plan.split, plan.split_seed());
    let mut history = Vec::new();
    let mut bound_log = Vec::new();
    log_bounds(&mut bound_log, 0, &state.dists(), schema);
    let mut steps = StepCounts::default();
    let mut pending = 0usize;
    let mut cursor = 0usize;
    let mut final_pred = None;
    let mut status = FitStatus::Ok;
    'epochs: for epoch in 1..=plan.epochs {
        let warm = epoch <= plan.warmup_epochs;
        let mut order = train_idx.clone();
        shuffle(&mut order, &mut stream_rng(plan.seed, epoch as u64, "batches"));
        let mut step_rng = stream_rng(plan.seed, epoch as u64, "train-steps");
        let mut tune_rng = stream_rng(plan.seed, epoch as u64, "tune-steps");
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            match state.train_step(data, chunk, &mut step_rng) {
                Ok(r) => {
                    batch_losses.push(r.loss);
                    if warm {
                        steps.warmup_train += 1;
                    } else {
                        steps.train += 1;
                    }
                }
                Err(e) if is_divergence(&e) => {
                    status = FitStatus::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            if warm {
                continue;
            }
            pending += 1;
            if pending < plan.train_steps_per_tune {
                continue;
            }
            pending = 0;
            let vidx: Vec<usize> = (0..plan.batch_size)
                .map(|t| val_idx[(cursor + t) % val_idx.len()])
                .collect();
            cursor = (cursor + plan.batch_size) % val_idx.len();
            match state.tune_step(data, &vidx, &mut tune_rng) {
                Ok(_) => steps.tune += 1,
                Err(e) if is_divergence(&e) => {
                    status = FitStatus::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        match state.eval_split(data, &val_idx) {
            Ok((val_loss, pred)) => {
                final_pred = Some(pred);
                history.push(EpochStats {
                    epoch,
                    train_loss: mean_of(&batch_losses),
                    val_loss,
                });
            }
            Err(e) if is_divergence(&e) => {
                status = FitStatus::Diverged { epoch };
                break 'epochs;
            }
            Err(e) => return Err(e),
        }
        log_bounds(&mut bound_log, epoch, &state.dists(), schema);
    }
    let dists = state.dists();
    let means: Vec<Vec<f64>> = dists.iter().map(|d| d.mean()).collect();
    let ok = status == FitStatus::Ok;
    let FitState { net, store, .. } = state;
    Ok(TrainedModel {
        status,
        net,
        store,
        dists: Some(dists),
        lambda: LambdaSummary::PerMember(means),
        history,
        bound_log,
        steps,
        val_predictions: if ok { final_pred } else { None },
    })
}
