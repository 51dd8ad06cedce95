//! Desk-scale check that a low-rank self-tuning layer tracks the exact
//! best response of a convex problem.
//!
//! On ridge and logistic objectives the best response `w(lambda0)`, the
//! unique minimizer of `g(w) + lambda0/2 ||w||^2`, is computable to machine
//! precision. A self-tuning map `lambda0 -> U e(lambda0)` fitted
//! stochastically against random hyperparameter draws can then be measured
//! directly: the per-point gap `||U e(lambda0) - w(lambda0)||` says how much
//! of the response curve the embedding captures, and the weighted summary
//! `E[lambda0 gap^2]` is bounded by the same quantity under the best map the
//! embedding could express (the regression oracle), up to smoothness
//! constants. [`bound_check`] computes both sides; [`gap_report`] emits the
//! per-point table as CSV.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, CowArray, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{OptimizerSpec, OptimizerState, ParamGroup, ParamStore};

/// Condition-estimate ceiling above which a solve is refused.
pub const COND_LIMIT: f64 = 1e12;

/// Steps averaged into one entry of the fit's objective trace.
pub const OBJECTIVE_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum BestResponseError {
    #[error("bad problem: {0}")]
    BadProblem(&'static str),
    #[error("bad arguments: {0}")]
    BadArgs(&'static str),
    #[error("solve refused: condition estimate {0:.3e} exceeds 1e12")]
    IllConditioned(f64),
    #[error("fit diverged at step {step}")]
    Diverged { step: usize },
    #[error("convex solver stalled at optimality residual {0:.3e}")]
    Stalled(f64),
}

/// Interval of hyperparameter values, sampled log-uniformly. A point mass
/// (`lo == hi`) is allowed; a zero or negative endpoint is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
}

impl Support {
    pub fn new(lo: f64, hi: f64) -> Result<Self, BestResponseError> {
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(BestResponseError::BadArgs(
                "support needs finite 0 < lo <= hi",
            ));
        }
        Ok(Support { lo, hi })
    }

    /// One decade starting at `lo`, the default width for these checks.
    pub fn decade(lo: f64) -> Result<Self, BestResponseError> {
        Support::new(lo, 10.0 * lo)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        let (la, lb) = (self.lo.ln(), self.hi.ln());
        (la + (lb - la) * rng.random::<f64>()).exp()
    }

    /// `n` log-spaced points covering the interval, endpoints included.
    /// One point lands on the geometric midpoint.
    pub fn log_grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 1, "empty grid");
        let (la, lb) = (self.lo.ln(), self.hi.ln());
        if n == 1 {
            return vec![(0.5 * (la + lb)).exp()];
        }
        (0..n)
            .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo * (1.0 - 1e-12) && v <= self.hi * (1.0 + 1e-12)
    }

    /// Log position inside the interval, mapped to [-1, 1]. A point mass
    /// maps everything to 0.
    pub fn normalize(&self, v: f64) -> f64 {
        let (la, lb) = (self.lo.ln(), self.hi.ln());
        if lb == la {
            return 0.0;
        }
        2.0 * (v.ln() - la) / (lb - la) - 1.0
    }
}

/// Fixed embedding `e(lambda0)`: plain powers `[1, z, z^2, ...]` of the
/// support-normalized log hyperparameter. Affine in `ln lambda0`, so its
/// span matches raw log-polynomial features while staying conditioned on
/// [-1, 1]. Rank `h` means degree `h - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyEmbedding {
    pub degree: usize,
}

impl PolyEmbedding {
    /// Embedding with `h` features; `h = 1` is the constant map.
    pub fn with_rank(h: usize) -> Result<Self, BestResponseError> {
        if h == 0 {
            return Err(BestResponseError::BadArgs("embedding rank must be >= 1"));
        }
        Ok(PolyEmbedding { degree: h - 1 })
    }

    pub fn rank(&self) -> usize {
        self.degree + 1
    }

    pub fn eval(&self, support: &Support, lambda0: f64) -> Array1<f64> {
        let z = support.normalize(lambda0);
        let mut e = Array1::zeros(self.rank());
        let mut p = 1.0;
        for j in 0..self.rank() {
            e[j] = p;
            p *= z;
        }
        e
    }
}

/// Per-example loss the best response is measured under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseLoss {
    /// `(m - y)^2 / 2`.
    Square,
    /// `ln(1 + exp(-y m))` with targets in {-1, +1}.
    Logistic,
}

/// Feature transform indexed by a secondary hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    /// Keep the design matrix as stored.
    #[default]
    Identity,
    /// Scale column `j` by `lambda1^j`, a simple one-knob family.
    ColumnPower,
}

/// Convex problem with a computable best response. The penalized objective
/// `g(w) + lambda0/2 ||w||^2` is strictly convex for every positive
/// `lambda0`, so the response is always unique.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    /// Design matrix, one example per row.
    pub phi: Array2<f64>,
    /// Targets: real values for [`ResponseLoss::Square`], -1/+1 labels for
    /// [`ResponseLoss::Logistic`].
    pub y: Array1<f64>,
    pub loss: ResponseLoss,
    /// Secondary hyperparameter driving the feature transform.
    pub lambda1: f64,
    pub transform: FeatureTransform,
}

impl RidgeProblem {
    pub fn square(phi: Array2<f64>, y: Array1<f64>) -> Self {
        RidgeProblem {
            phi,
            y,
            loss: ResponseLoss::Square,
            lambda1: 1.0,
            transform: FeatureTransform::Identity,
        }
    }

    pub fn logistic(phi: Array2<f64>, y: Array1<f64>) -> Result<Self, BestResponseError> {
        let p = RidgeProblem {
            phi,
            y,
            loss: ResponseLoss::Logistic,
            lambda1: 1.0,
            transform: FeatureTransform::Identity,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), BestResponseError> {
        let (n, k) = self.phi.dim();
        if n == 0 || k == 0 {
            return Err(BestResponseError::BadProblem("empty design matrix"));
        }
        if self.y.len() != n {
            return Err(BestResponseError::BadProblem("target count != row count"));
        }
        if self.phi.iter().any(|v| !v.is_finite()) || self.y.iter().any(|v| !v.is_finite()) {
            return Err(BestResponseError::BadProblem("non-finite entries"));
        }
        if !self.lambda1.is_finite() || self.lambda1 <= 0.0 {
            return Err(BestResponseError::BadProblem("lambda1 must be positive"));
        }
        if self.loss == ResponseLoss::Logistic && self.y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(BestResponseError::BadProblem("logistic targets must be -1 or +1"));
        }
        Ok(())
    }

    /// Design matrix after the transform; borrows when it is the identity.
    pub fn features(&self) -> CowArray<'_, f64, Ix2> {
        match self.transform {
            FeatureTransform::Identity => CowArray::from(self.phi.view()),
            FeatureTransform::ColumnPower => {
                let mut out = self.phi.clone();
                let mut scale = 1.0;
                for mut col in out.columns_mut() {
                    col.mapv_inplace(|v| v * scale);
                    scale *= self.lambda1;
                }
                CowArray::from(out)
            }
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus_neg(t: f64) -> f64 {
    // ln(1 + exp(-t)) without overflow on either tail.
    if t >= 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

/// Data term `g(w)`, the penalty excluded.
pub fn data_loss(problem: &RidgeProblem, w: ArrayView1<f64>) -> f64 {
    let feats = problem.features();
    let m = feats.view().dot(&w);
    let n = m.len() as f64;
    match problem.loss {
        ResponseLoss::Square => {
            m.iter()
                .zip(problem.y.iter())
                .map(|(&mi, &yi)| (mi - yi) * (mi - yi))
                .sum::<f64>()
                / (2.0 * n)
        }
        ResponseLoss::Logistic => {
            m.iter()
                .zip(problem.y.iter())
                .map(|(&mi, &yi)| softplus_neg(yi * mi))
                .sum::<f64>()
                / n
        }
    }
}

/// Gradient of the data term.
pub fn data_grad(problem: &RidgeProblem, w: ArrayView1<f64>) -> Array1<f64> {
    let feats = problem.features();
    let m = feats.view().dot(&w);
    let n = m.len() as f64;
    let residual: Array1<f64> = match problem.loss {
        ResponseLoss::Square => {
            Array1::from_iter(m.iter().zip(problem.y.iter()).map(|(&mi, &yi)| mi - yi))
        }
        ResponseLoss::Logistic => Array1::from_iter(
            m.iter()
                .zip(problem.y.iter())
                .map(|(&mi, &yi)| -yi * sigmoid(-yi * mi)),
        ),
    };
    feats.view().t().dot(&residual) / n
}

/// `||grad g(w) + lambda0 w||`, zero exactly at the best response.
pub fn optimality_residual(problem: &RidgeProblem, lambda0: f64, w: ArrayView1<f64>) -> f64 {
    let g = data_grad(problem, w) + &(lambda0 * &w.to_owned());
    g.dot(&g).sqrt()
}

/// Smallest Lipschitz constant certified for `grad g`: the top eigenvalue of
/// the scaled Gram matrix, quartered for logistic curvature.
pub fn grad_lipschitz(problem: &RidgeProblem) -> f64 {
    let feats = problem.features();
    let n = feats.nrows() as f64;
    let gram = feats.view().t().dot(&feats.view()) / n;
    let (d, _) = sym_eigen(gram.view());
    let top = d.iter().cloned().fold(0.0_f64, f64::max);
    match problem.loss {
        ResponseLoss::Square => top,
        ResponseLoss::Logistic => top / 4.0,
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix:
/// `a = v diag(d) v^T` with orthonormal columns in `v`. Intended for the
/// small Gram matrices this module works with.
fn sym_eigen(a: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let k = a.nrows();
    assert_eq!(k, a.ncols(), "eigensolver needs a square matrix");
    let mut m = a.to_owned();
    let mut v = Array2::eye(k);
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if (2.0 * off).sqrt() <= 1e-15 * norm {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..k {
                    let (mip, miq) = (m[[i, p]], m[[i, q]]);
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..k {
                    let (mpj, mqj) = (m[[p, j]], m[[q, j]]);
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..k {
                    let (vip, viq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let d = Array1::from_iter((0..k).map(|i| m[[i, i]]));
    (d, v)
}

/// Solves `(a + shift I) x = rhs` for symmetric positive semidefinite `a`
/// through its eigendecomposition. Tiny negative eigenvalues from roundoff
/// are clamped to zero; a shifted spectrum spanning more than [`COND_LIMIT`]
/// is refused.
fn spd_shift_solve(
    a: ArrayView2<f64>,
    shift: f64,
    rhs: ArrayView1<f64>,
) -> Result<Array1<f64>, BestResponseError> {
    let (d, v) = sym_eigen(a);
    let d = d.mapv(|x| x.max(0.0));
    let hi = d.iter().cloned().fold(0.0_f64, f64::max) + shift;
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min) + shift;
    let cond = hi / lo;
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(BestResponseError::IllConditioned(cond));
    }
    let proj = v.t().dot(&rhs);
    let scaled = Array1::from_iter(proj.iter().zip(d.iter()).map(|(&p, &di)| p / (di + shift)));
    Ok(v.dot(&scaled))
}

/// Exact best response at one hyperparameter value. Square loss uses the
/// closed form `(Phi^T Phi / n + lambda0 I)^{-1} Phi^T y / n`; logistic runs
/// a damped Newton solve down to an optimality residual of 1e-12.
pub fn ridge_closed_form(
    problem: &RidgeProblem,
    lambda0: f64,
) -> Result<Array1<f64>, BestResponseError> {
    problem.check()?;
    if !lambda0.is_finite() || lambda0 <= 0.0 {
        return Err(BestResponseError::BadArgs("lambda0 must be positive"));
    }
    let feats = problem.features();
    let n = feats.nrows() as f64;
    match problem.loss {
        ResponseLoss::Square => {
            let gram = feats.view().t().dot(&feats.view()) / n;
            let rhs = feats.view().t().dot(&problem.y) / n;
            spd_shift_solve(gram.view(), lambda0, rhs.view())
        }
        ResponseLoss::Logistic => logistic_newton(&feats.view(), &problem.y, lambda0),
    }
}

fn logistic_objective(feats: &ArrayView2<f64>, y: &Array1<f64>, lambda0: f64, w: &Array1<f64>) -> f64 {
    let m = feats.dot(w);
    let n = m.len() as f64;
    let data = m
        .iter()
        .zip(y.iter())
        .map(|(&mi, &yi)| softplus_neg(yi * mi))
        .sum::<f64>()
        / n;
    data + 0.5 * lambda0 * w.dot(w)
}

fn logistic_newton(
    feats: &ArrayView2<f64>,
    y: &Array1<f64>,
    lambda0: f64,
) -> Result<Array1<f64>, BestResponseError> {
    let (n, k) = feats.dim();
    let nf = n as f64;
    let mut w = Array1::zeros(k);
    let mut res = f64::INFINITY;
    for _ in 0..100 {
        let m = feats.dot(&w);
        let sig_neg = Array1::from_iter(
            m.iter()
                .zip(y.iter())
                .map(|(&mi, &yi)| sigmoid(-yi * mi)),
        );
        let grad_data = feats.t().dot(&Array1::from_iter(
            sig_neg.iter().zip(y.iter()).map(|(&s, &yi)| -yi * s),
        )) / nf;
        let grad = grad_data + &(lambda0 * &w);
        res = grad.dot(&grad).sqrt();
        if res <= 1e-12 {
            return Ok(w);
        }
        // Curvature sigma(t)(1 - sigma(t)) = sigma(-t) sigma(t) per row.
        let curv = Array1::from_iter(sig_neg.iter().map(|&s| s * (1.0 - s)));
        let weighted = feats.to_owned() * &curv.view().insert_axis(Axis(1));
        let hess_data = feats.t().dot(&weighted) / nf;
        let step = spd_shift_solve(hess_data.view(), lambda0, grad.view())?;
        let before = logistic_objective(feats, y, lambda0, &w);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &w - &(alpha * &step);
            // The ulp-sized tolerance lets the final noise-floor steps
            // through; without it the residual parks a decade too high.
            if logistic_objective(feats, y, lambda0, &trial) <= before * (1.0 + 1e-14) {
                w = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    // One more residual read in case the last accepted step finished the job.
    let final_res = optimality_residual(
        &RidgeProblem {
            phi: feats.to_owned(),
            y: y.clone(),
            loss: ResponseLoss::Logistic,
            lambda1: 1.0,
            transform: FeatureTransform::Identity,
        },
        lambda0,
        w.view(),
    );
    if final_res <= 1e-10 {
        Ok(w)
    } else {
        Err(BestResponseError::Stalled(final_res.min(res)))
    }
}

/// Dense layer whose weight is a rank-`h` function of the hyperparameter:
/// `W(lambda0) = W + (G o e(lambda0)) H^T` with a fixed embedding, `o`
/// scaling column `j` of `G` by `e_j`. At `h = s` with one-hot `H` columns
/// this is exactly the column-modulated self-tuning layer, at a fraction of
/// the parameters when `h << s`.
#[derive(Debug, Clone)]
pub struct LowRankSelfTuningDense {
    /// Base weight, `r x s`.
    pub base: Array2<f64>,
    /// Left factor `G`, `r x h`.
    pub left: Array2<f64>,
    /// Right factor `H`, `s x h`.
    pub right: Array2<f64>,
    pub embedding: PolyEmbedding,
    pub support: Support,
}

impl LowRankSelfTuningDense {
    pub fn new(
        base: Array2<f64>,
        left: Array2<f64>,
        right: Array2<f64>,
        embedding: PolyEmbedding,
        support: Support,
    ) -> Result<Self, BestResponseError> {
        let (r, s) = base.dim();
        let h = left.ncols();
        if h == 0 {
            return Err(BestResponseError::BadArgs("rank must be >= 1"));
        }
        if left.nrows() != r || right.dim() != (s, h) || embedding.rank() != h {
            return Err(BestResponseError::BadArgs("factor shapes disagree"));
        }
        Ok(LowRankSelfTuningDense {
            base,
            left,
            right,
            embedding,
            support,
        })
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    /// Modulated weight for explicit embedding values.
    pub fn weight_with(&self, e: ArrayView1<f64>) -> Array2<f64> {
        assert_eq!(e.len(), self.rank(), "embedding length != rank");
        let scaled = &self.left * &e;
        &self.base + &scaled.dot(&self.right.t())
    }

    pub fn weight_at(&self, lambda0: f64) -> Array2<f64> {
        self.weight_with(self.embedding.eval(&self.support, lambda0).view())
    }

    /// Forward with one embedding row per batch row, evaluated in factored
    /// order `x W + ((x G) o e) H^T` so the one-hot case reproduces the
    /// column-modulated layer bit for bit.
    pub fn forward_with(&self, x: ArrayView2<f64>, e_rows: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(e_rows.dim(), (x.nrows(), self.rank()), "embedding rows misshapen");
        let base_out = x.dot(&self.base);
        let hyper = (&x.dot(&self.left) * &e_rows).dot(&self.right.t());
        base_out + hyper
    }

    pub fn forward(&self, x: ArrayView2<f64>, lambda0: f64) -> Array2<f64> {
        let e = self.embedding.eval(&self.support, lambda0);
        let rows = Array2::from_shape_fn((x.nrows(), self.rank()), |(_, j)| e[j]);
        self.forward_with(x, rows.view())
    }
}

/// Knobs for the stochastic fit. Each step draws one hyperparameter value
/// and one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct ResponseFitPlan {
    pub steps: usize,
    /// Rows per step, drawn with replacement. A batch of `n` or more walks
    /// every row exactly once, making the data term deterministic.
    pub batch: usize,
    pub opt: OptimizerSpec,
}

impl ResponseFitPlan {
    pub fn new(steps: usize, batch: usize) -> Self {
        ResponseFitPlan {
            steps,
            batch,
            opt: OptimizerSpec::adam(1e-2),
        }
    }

    pub fn with_opt(mut self, opt: OptimizerSpec) -> Self {
        self.opt = opt;
        self
    }
}

/// A fitted hyperparameter-to-weights map plus its objective trace.
#[derive(Debug, Clone)]
pub struct ResponseFit {
    /// The map: `w_hat(lambda0) = u . e(lambda0)`, `k x h`.
    pub u: Array2<f64>,
    /// Mean regularized objective per [`OBJECTIVE_WINDOW`]-step window.
    /// Runs shorter than one window average what they have; a partial tail
    /// window is dropped otherwise.
    pub objective_windows: Vec<f64>,
}

impl ResponseFit {
    /// Final expected-objective estimate: the last full window's mean.
    pub fn final_objective(&self) -> f64 {
        *self.objective_windows.last().expect("at least one window")
    }
}

/// Stochastically minimizes
/// `E_Q[ mean_batch loss(y, phi^T U e(lambda0)) + lambda0/2 ||U e(lambda0)||^2 ]`
/// from a zero start. Single-threaded; determinism rests entirely on the
/// caller's generator.
pub fn fit_bestresponse(
    problem: &RidgeProblem,
    embedding: PolyEmbedding,
    support: Support,
    plan: &ResponseFitPlan,
    rng: &mut impl Rng,
) -> Result<ResponseFit, BestResponseError> {
    problem.check()?;
    if plan.steps == 0 {
        return Err(BestResponseError::BadArgs("steps must be >= 1"));
    }
    if plan.batch == 0 {
        return Err(BestResponseError::BadArgs("batch must be >= 1"));
    }
    let feats = problem.features();
    let (n, k) = feats.dim();
    let h = embedding.rank();

    let mut store = ParamStore::new();
    let uid = store.add("u", Array2::<f64>::zeros((k, h)).into_dyn(), ParamGroup::Weights);
    let mut opt = OptimizerState::new(plan.opt, &store);

    let mut windows = Vec::new();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    for step in 0..plan.steps {
        let lambda0 = support.sample(rng);
        let e = embedding.eval(&support, lambda0);
        let u = store
            .value(uid)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("u is a matrix");
        let ue = u.dot(&e);

        let full = plan.batch >= n;
        let bsz = plan.batch.min(n);
        let mut grad_ue = Array1::<f64>::zeros(k);
        let mut data = 0.0;
        for b in 0..bsz {
            let i = if full { b } else { rng.random_range(0..n) };
            let row = feats.row(i);
            let m = row.dot(&ue);
            let yi = problem.y[i];
            match problem.loss {
                ResponseLoss::Square => {
                    let r = m - yi;
                    data += 0.5 * r * r;
                    grad_ue.scaled_add(r, &row);
                }
                ResponseLoss::Logistic => {
                    data += softplus_neg(yi * m);
                    grad_ue.scaled_add(-yi * sigmoid(-yi * m), &row);
                }
            }
        }
        data /= bsz as f64;
        grad_ue.mapv_inplace(|g| g / bsz as f64);
        grad_ue.scaled_add(lambda0, &ue);
        let objective = data + 0.5 * lambda0 * ue.dot(&ue);
        if !objective.is_finite() || grad_ue.iter().any(|g| !g.is_finite()) {
            return Err(BestResponseError::Diverged { step });
        }

        let grad_u = grad_ue
            .view()
            .insert_axis(Axis(1))
            .dot(&e.view().insert_axis(Axis(0)));
        opt.step(&mut store, &[Some(grad_u.into_dyn())], &[1.0])
            .map_err(|_| BestResponseError::Diverged { step })?;

        acc += objective;
        acc_n += 1;
        if acc_n == OBJECTIVE_WINDOW {
            windows.push(acc / acc_n as f64);
            acc = 0.0;
            acc_n = 0;
        }
    }
    if windows.is_empty() && acc_n > 0 {
        windows.push(acc / acc_n as f64);
    }
    let u = store
        .value(uid)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("u is a matrix")
        .to_owned();
    Ok(ResponseFit {
        u,
        objective_windows: windows,
    })
}

/// One grid row of the response gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRow {
    pub lambda0: f64,
    /// `||U e(lambda0) - w(lambda0)||`.
    pub gap: f64,
    /// Gap scaled by `sqrt(lambda0)`, the weighting the response bound uses.
    pub weighted: f64,
}

/// Response gaps over a hyperparameter grid. On a log-spaced grid the means
/// estimate expectations under the log-uniform draw.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    /// Mean gap over the grid.
    pub mean_gap: f64,
    /// Mean of `weighted^2 = lambda0 gap^2`, the bound's left-hand side.
    pub mean_weighted_sq: f64,
}

impl GapReport {
    /// CSV with header `lambda0,gap,weighted`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda0,gap,weighted\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.lambda0, r.gap, r.weighted).expect("string write");
        }
        out
    }
}

/// Measures `||U e(lambda0) - w(lambda0)||` on each grid point. The grid
/// must lie inside the support the map was fitted for.
pub fn gap_report(
    u: ArrayView2<f64>,
    embedding: PolyEmbedding,
    support: Support,
    problem: &RidgeProblem,
    grid: &[f64],
) -> Result<GapReport, BestResponseError> {
    problem.check()?;
    if grid.is_empty() {
        return Err(BestResponseError::BadArgs("empty grid"));
    }
    if u.dim() != (problem.phi.ncols(), embedding.rank()) {
        return Err(BestResponseError::BadArgs("map shape disagrees with problem"));
    }
    if grid.iter().any(|&l| !support.contains(l)) {
        return Err(BestResponseError::BadArgs("grid leaves the support"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda0 in grid {
        let w = ridge_closed_form(problem, lambda0)?;
        let pred = u.dot(&embedding.eval(&support, lambda0));
        let diff = &pred - &w;
        let gap = diff.dot(&diff).sqrt();
        rows.push(GapRow {
            lambda0,
            gap,
            weighted: gap * lambda0.sqrt(),
        });
    }
    let m = rows.len() as f64;
    Ok(GapReport {
        mean_gap: rows.iter().map(|r| r.gap).sum::<f64>() / m,
        mean_weighted_sq: rows.iter().map(|r| r.weighted * r.weighted).sum::<f64>() / m,
        rows,
    })
}

/// Least-squares regression of the exact responses onto the embedding over
/// a grid: the best map the embedding could express there, used as the
/// approximation oracle.
pub fn regress_best_response(
    problem: &RidgeProblem,
    embedding: PolyEmbedding,
    support: Support,
    grid: &[f64],
) -> Result<Array2<f64>, BestResponseError> {
    problem.check()?;
    let h = embedding.rank();
    if grid.len() < h {
        return Err(BestResponseError::BadArgs("grid smaller than embedding rank"));
    }
    let k = problem.phi.ncols();
    let m = grid.len();
    let mut e_mat = Array2::zeros((h, m));
    let mut w_mat = Array2::zeros((k, m));
    for (j, &lambda0) in grid.iter().enumerate() {
        e_mat
            .column_mut(j)
            .assign(&embedding.eval(&support, lambda0));
        w_mat.column_mut(j).assign(&ridge_closed_form(problem, lambda0)?);
    }
    // Normal equations (E E^T) X = E W^T, solved column by column.
    let gram = e_mat.dot(&e_mat.t());
    let rhs = e_mat.dot(&w_mat.t());
    let mut x = Array2::zeros((h, k));
    for j in 0..k {
        x.column_mut(j)
            .assign(&spd_shift_solve(gram.view(), 0.0, rhs.column(j))?);
    }
    Ok(x.t().to_owned())
}

/// Both sides of the response bound, estimated on a grid standing in for Q:
/// the fitted map's weighted squared gap against the smoothness-scaled gap
/// of the regression oracle.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    /// `E[lambda0 ||U e - w||^2]` for the fitted map.
    pub fitted_side: f64,
    /// `E[(L + lambda0) ||U_app e - w||^2]` for the oracle map.
    pub oracle_side: f64,
}

impl BoundCheck {
    /// The optimization error term is unmeasurable, so the check carries a
    /// fixed slack factor instead.
    pub fn holds_with_slack(&self, slack: f64) -> bool {
        self.fitted_side <= slack * self.oracle_side + 1e-300
    }
}

/// Evaluates [`BoundCheck`] for a fitted map `u` on the given grid.
pub fn bound_check(
    problem: &RidgeProblem,
    embedding: PolyEmbedding,
    support: Support,
    grid: &[f64],
    u: ArrayView2<f64>,
) -> Result<BoundCheck, BestResponseError> {
    let lip = grad_lipschitz(problem);
    let u_app = regress_best_response(problem, embedding, support, grid)?;
    let mut fitted = 0.0;
    let mut oracle = 0.0;
    for &lambda0 in grid {
        let e = embedding.eval(&support, lambda0);
        let w = ridge_closed_form(problem, lambda0)?;
        let d_fit = &u.dot(&e) - &w;
        let d_app = &u_app.dot(&e) - &w;
        fitted += lambda0 * d_fit.dot(&d_fit);
        oracle += (lip + lambda0) * d_app.dot(&d_app);
    }
    let m = grid.len() as f64;
    Ok(BoundCheck {
        fitted_side: fitted / m,
        oracle_side: oracle / m,
    })
}

/// Smallest eigenvalues of the sampled second-moment matrices
/// `E[e e^T]` and `E[lambda0 e e^T]`. Both must come out positive for the
/// response bound's premises to hold on this support.
pub fn embedding_moments_min_eig(
    embedding: PolyEmbedding,
    support: Support,
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    assert!(samples >= 1, "need at least one sample");
    let h = embedding.rank();
    let mut sigma = Array2::<f64>::zeros((h, h));
    let mut c = Array2::<f64>::zeros((h, h));
    for _ in 0..samples {
        let lambda0 = support.sample(rng);
        let e = embedding.eval(&support, lambda0);
        let outer = e
            .view()
            .insert_axis(Axis(1))
            .dot(&e.view().insert_axis(Axis(0)));
        sigma += &outer;
        c.scaled_add(lambda0, &outer);
    }
    sigma /= samples as f64;
    c /= samples as f64;
    let min_eig = |m: &Array2<f64>| {
        let (d, _) = sym_eigen(m.view());
        d.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    (min_eig(&sigma), min_eig(&c))
}
