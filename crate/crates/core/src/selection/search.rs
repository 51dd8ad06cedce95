//! Training drivers that build the record pools: random search over the
//! hyperparameter box and the stratified two-round ensemble procedure.
//!
//! Trials are independent, so they fan out over a small thread pool.
//! Completed trials append to the shared ledger as they finish; on restart
//! the driver reloads finished ids and trains only the gaps. Trial ids are
//! pure functions of the run seed, so a resumed run and a fresh run produce
//! identical pools.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;

use crate::datastore::{checkpoint_save, split_indices, store_to_arrays, Ledger};
use crate::diffcore::stream_rng;
use crate::hyperdist::{HyperSchema, MemberDistribution};
use crate::metrics::basic_metrics;
use crate::trainer::{
    check_data, train_fixed, LossConfig, ModelSpec, TaskData, TrainPlan, TrainedModel,
};

use super::{
    hyper_ens, EnsembleSelection, ModelRecord, RecordStatus, ScoreKind, SelectError,
};

/// Everything a search run needs besides its size and seed.
#[derive(Clone, Copy)]
pub struct SearchCtx<'a> {
    pub spec: &'a ModelSpec,
    pub schema: &'a HyperSchema,
    /// Template plan. Each trial clones it with its own init seed while the
    /// validation split stays pinned to the template's split seed.
    pub plan: &'a TrainPlan,
    pub loss: &'a LossConfig,
    pub data: &'a TaskData,
    /// Extra held-out rows scored into `test_predictions` when present.
    pub test: Option<&'a TaskData>,
    /// Concurrent trial workers; 0 behaves as 1.
    pub workers: usize,
    /// Completed trials append here and are reused on rerun.
    pub ledger: Option<&'a Ledger>,
    /// Trained parameters are checkpointed here when set.
    pub ckpt_dir: Option<&'a Path>,
}

impl<'a> SearchCtx<'a> {
    fn validate(&self) -> Result<(), SelectError> {
        self.plan.validate()?;
        self.loss.validate()?;
        check_data(self.spec, self.loss, self.data)?;
        if let Some(t) = self.test {
            if t.features.ncols() != self.data.features.ncols() || t.out_dim() != self.data.out_dim()
            {
                return Err(SelectError::BadArgs(
                    "test rows do not match the training data shape",
                ));
            }
        }
        Ok(())
    }

    /// Validation labels under the pinned split, shared by every trial.
    pub fn val_labels(&self) -> Result<Vec<usize>, SelectError> {
        let labels = self
            .data
            .labels()
            .ok_or(SelectError::BadArgs("selection needs class labels"))?;
        let (_, val_idx) = split_indices(self.data.len(), self.plan.split, self.plan.split_seed());
        Ok(val_idx.iter().map(|&i| labels[i]).collect())
    }
}

/// Run `jobs` through `workers` threads, keeping result order.
fn run_pool<J, R, F>(jobs: Vec<J>, workers: usize, f: F) -> Vec<R>
where
    J: Send,
    R: Send,
    F: Fn(J) -> R + Sync,
{
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let jobs: Vec<Mutex<Option<J>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let out: Vec<Mutex<Option<R>>> = (0..jobs.len()).map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let job = jobs[i].lock().unwrap().take().unwrap();
                *out[i].lock().unwrap() = Some(f(job));
            });
        }
    });
    out.into_iter()
        .map(|m| m.into_inner().unwrap().unwrap())
        .collect()
}

struct Trial {
    id: usize,
    lambda: Vec<f64>,
    init_seed: u64,
}

/// Train one candidate and fold every failure into the record.
fn run_trial(ctx: &SearchCtx, trial: Trial, val_labels: &[usize]) -> ModelRecord {
    let mut plan = ctx.plan.clone();
    plan.split_seed = Some(ctx.plan.split_seed());
    plan.seed = trial.init_seed;
    let mut record = ModelRecord {
        id: trial.id,
        lambda: trial.lambda.clone(),
        init_seed: trial.init_seed,
        checkpoint: None,
        status: RecordStatus::Ok,
        val_predictions: None,
        test_predictions: None,
        metrics: std::collections::BTreeMap::new(),
    };
    let fail = |record: &mut ModelRecord, reason: String| {
        record.status = RecordStatus::Failed { reason };
        record.val_predictions = None;
        record.test_predictions = None;
    };
    match train_fixed(ctx.spec, ctx.schema, &trial.lambda, &plan, ctx.loss, ctx.data) {
        Ok(m) if m.is_ok() => {
            record.val_predictions = m.val_predictions.clone();
            match fill_outputs(ctx, &m, &mut record, val_labels) {
                Ok(()) => {}
                Err(e) => fail(&mut record, e.to_string()),
            }
        }
        Ok(m) => {
            let reason = match m.status {
                crate::trainer::FitStatus::Diverged { epoch } => {
                    format!("diverged at epoch {epoch}")
                }
                crate::trainer::FitStatus::Ok => unreachable!(),
            };
            fail(&mut record, reason);
        }
        Err(e) => fail(&mut record, e.to_string()),
    }
    record
}

fn fill_outputs(
    ctx: &SearchCtx,
    m: &TrainedModel,
    record: &mut ModelRecord,
    val_labels: &[usize],
) -> Result<(), SelectError> {
    let val = record
        .val_predictions
        .as_ref()
        .ok_or(SelectError::BadArgs("trial produced no validation rows"))?;
    let (nll, acc, brier) = basic_metrics(val.view(), val_labels);
    record.metrics.insert("val_nll".into(), nll);
    record.metrics.insert("val_accuracy".into(), acc);
    record.metrics.insert("val_brier".into(), brier);
    if let Some(test) = ctx.test {
        let probs = m.predict(ctx.schema, test.features.view())?;
        if let Some(labels) = test.labels() {
            let (nll, acc, brier) = basic_metrics(probs.view(), labels);
            record.metrics.insert("test_nll".into(), nll);
            record.metrics.insert("test_accuracy".into(), acc);
            record.metrics.insert("test_brier".into(), brier);
        }
        record.test_predictions = Some(probs);
    }
    if let Some(dir) = ctx.ckpt_dir {
        let name = format!("model_{:05}.ckpt", record.id);
        checkpoint_save(dir.join(&name), &store_to_arrays(&m.store))?;
        record.checkpoint = Some(name);
    }
    Ok(())
}

/// Load completed records keyed by id; absent or unreadable ledgers are
/// treated as empty.
fn completed(ctx: &SearchCtx) -> Result<std::collections::BTreeMap<usize, ModelRecord>, SelectError>
{
    let Some(ledger) = ctx.ledger else {
        return Ok(Default::default());
    };
    let scan = ledger.scan::<ModelRecord>()?;
    let mut map = std::collections::BTreeMap::new();
    for row in scan.rows {
        map.entry(row.id).or_insert(row);
    }
    Ok(map)
}

fn run_missing(
    ctx: &SearchCtx,
    trials: Vec<Trial>,
    done: &mut std::collections::BTreeMap<usize, ModelRecord>,
    val_labels: &[usize],
) -> Result<(), SelectError> {
    let todo: Vec<Trial> = trials
        .into_iter()
        .filter(|t| !done.contains_key(&t.id))
        .collect();
    let fresh = run_pool(todo, ctx.workers, |t| {
        let r = run_trial(ctx, t, val_labels);
        let appended = match ctx.ledger {
            Some(l) => l.append(&r).map(|()| r),
            None => Ok(r),
        };
        appended
    });
    for r in fresh {
        let r = r?;
        done.insert(r.id, r);
    }
    Ok(())
}

/// Train `kappa` candidates at hyperparameters drawn log-uniformly over the
/// schema box, each from a fresh parameter initialization.
///
/// Trial `j`'s draw and seed depend only on `(seed, j)`, and finished trials
/// found in the ledger are reused, so interrupted runs resume where they
/// stopped. Individual trial failures become failed records, never errors.
pub fn rand_search(
    ctx: &SearchCtx,
    kappa: usize,
    seed: u64,
) -> Result<Vec<ModelRecord>, SelectError> {
    if kappa == 0 {
        return Err(SelectError::BadArgs("kappa must be >= 1"));
    }
    ctx.validate()?;
    let val_labels = ctx.val_labels()?;
    let full = MemberDistribution::full(ctx.schema);
    let trials: Vec<Trial> = (0..kappa)
        .map(|j| {
            let mut rng = stream_rng(seed, j as u64, "search");
            let lambda = full.sample_batch(1, &mut rng).values.row(0).to_vec();
            Trial {
                id: j,
                lambda,
                init_seed: rng.random(),
            }
        })
        .collect();
    let mut done = completed(ctx)?;
    run_missing(ctx, trials, &mut done, &val_labels)?;
    Ok((0..kappa).map(|j| done[&j].clone()).collect())
}

/// Where a stratified record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub id: usize,
    /// Index into the first-round selection's unique members (which
    /// hyperparameters).
    pub row: usize,
    /// Seed slot within that row.
    pub col: usize,
    /// True when the slot reuses the first-round model instead of retraining.
    pub reused: bool,
}

/// Outcome of the two-round procedure, with full provenance.
#[derive(Debug, Clone)]
pub struct HyperDeepResult {
    /// The random-search pool, ids `0..kappa`.
    pub search: Vec<ModelRecord>,
    /// First-round selection over the search pool.
    pub first: EnsembleSelection,
    /// The stratified pool the final selection draws from.
    pub stratified: Vec<ModelRecord>,
    pub provenance: Vec<Provenance>,
    pub selection: EnsembleSelection,
    /// Models the full procedure trains, counting reuse: `kappa` search
    /// trials plus the stratified retrains.
    pub trained: usize,
}

/// Two-round stratified ensemble: random search, greedy selection, then a
/// grid of fresh initialization seeds per selected hyperparameter vector,
/// and a final greedy selection over that grid.
///
/// With `reuse_originals` set, each row's first seed slot is the already
/// trained first-round model, saving `unique` retrains.
pub fn hyper_deep_ens(
    ctx: &SearchCtx,
    k: usize,
    kappa: usize,
    seed: u64,
    reuse_originals: bool,
    kind: ScoreKind,
) -> Result<HyperDeepResult, SelectError> {
    if k == 0 {
        return Err(SelectError::BadArgs("target size must be >= 1"));
    }
    if kappa < k {
        return Err(SelectError::BadArgs(
            "the search pool must be at least the target size",
        ));
    }
    let search = rand_search(ctx, kappa, seed)?;
    let val_labels = ctx.val_labels()?;
    let first = hyper_ens(&search, k, &val_labels, kind)?;

    let mut trials = Vec::new();
    let mut provenance = Vec::new();
    let mut stratified = Vec::new();
    for (row, &(orig_id, _)) in first.members.iter().enumerate() {
        let orig = search.iter().find(|r| r.id == orig_id).unwrap();
        for col in 0..k {
            if col == 0 && reuse_originals {
                stratified.push(orig.clone());
                provenance.push(Provenance {
                    id: orig.id,
                    row,
                    col,
                    reused: true,
                });
                continue;
            }
            let id = kappa + row * k + col;
            let mut rng = stream_rng(seed, id as u64, "stratify");
            trials.push(Trial {
                id,
                lambda: orig.lambda.clone(),
                init_seed: rng.random(),
            });
            provenance.push(Provenance {
                id,
                row,
                col,
                reused: false,
            });
        }
    }
    let retrains = trials.len();
    let mut done = completed(ctx)?;
    run_missing(ctx, trials, &mut done, &val_labels)?;
    for p in &provenance {
        if !p.reused {
            stratified.push(done[&p.id].clone());
        }
    }
    stratified.sort_by_key(|r| r.id);

    let selection = hyper_ens(&stratified, k, &val_labels, kind)?;
    Ok(HyperDeepResult {
        search,
        first,
        stratified,
        provenance,
        selection,
        trained: kappa + retrains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{synth, SynthKind};
    use crate::diffcore::OptimizerSpec;
    use crate::ensemble_layers::HyperLayerConfig;
    use crate::hyperdist::{HyperKind, SchemaEntry, Scope};
    use crate::selection::PredSet;
    use crate::trainer::Activation;

    fn quick_ctx_parts() -> (ModelSpec, HyperSchema, TrainPlan, LossConfig, TaskData, TaskData)
    {
        let spec = ModelSpec {
            in_dim: 2,
            out_dim: 2,
            hidden: vec![4],
            activation: Activation::Relu,
            layer: HyperLayerConfig::default(),
        };
        let schema = HyperSchema::new(vec![SchemaEntry {
            name: "l2".into(),
            kind: HyperKind::L2Weights,
            scope: Scope::Global,
            lower: 1e-6,
            upper: 1e-1,
        }])
        .unwrap();
        let mut plan = TrainPlan::new(2, 16, 5);
        plan.param_opt = OptimizerSpec::adam(3e-3);
        let gen = |seed| {
            TaskData::from_dataset(&synth(
                &SynthKind::TwoGaussians {
                    separation: 4.0,
                    nuisance_dims: 0,
                },
                80,
                seed,
            ))
        };
        (spec, schema, plan, LossConfig::default(), gen(1), gen(2))
    }

    #[test]
    fn search_is_reproducible_and_in_bounds() {
        let (spec, schema, plan, loss, data, test) = quick_ctx_parts();
        let ctx = SearchCtx {
            spec: &spec,
            schema: &schema,
            plan: &plan,
            loss: &loss,
            data: &data,
            test: Some(&test),
            workers: 2,
            ledger: None,
            ckpt_dir: None,
        };
        let a = rand_search(&ctx, 3, 11).unwrap();
        let b = rand_search(&ctx, 3, 11).unwrap();
        assert_eq!(a.len(), 3);
        for (i, r) in a.iter().enumerate() {
            assert_eq!(r.id, i);
            assert!(r.is_ok());
            assert!(r.lambda[0] >= 1e-6 && r.lambda[0] <= 1e-1);
            assert!(r.test_predictions.is_some());
            assert!(r.metrics.contains_key("val_nll"));
            assert_eq!(r.lambda, b[i].lambda);
            assert_eq!(r.init_seed, b[i].init_seed);
            assert_eq!(r.metrics, b[i].metrics);
        }
        // Distinct trials draw distinct hyperparameters and seeds.
        assert_ne!(a[0].lambda, a[1].lambda);
        assert_ne!(a[0].init_seed, a[1].init_seed);
        // Best single validation NLL is at most the median.
        let mut nlls: Vec<f64> = a.iter().map(|r| r.metrics["val_nll"]).collect();
        nlls.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(nlls[0] <= nlls[1]);
    }

    #[test]
    fn ledger_rows_are_reused_not_retrained() {
        let (spec, schema, plan, loss, data, _) = quick_ctx_parts();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        let ledger = Ledger::open(&path).unwrap();
        let ctx = SearchCtx {
            spec: &spec,
            schema: &schema,
            plan: &plan,
            loss: &loss,
            data: &data,
            test: None,
            workers: 1,
            ledger: Some(&ledger),
            ckpt_dir: None,
        };
        let first = rand_search(&ctx, 2, 7).unwrap();
        // Plant a fake completed trial for id 2; a resumed run must keep it
        // verbatim instead of training its own.
        let mut fake = first[0].clone();
        fake.id = 2;
        fake.metrics.insert("val_nll".into(), -123.0);
        ledger.append(&fake).unwrap();

        let resumed = rand_search(&ctx, 3, 7).unwrap();
        assert_eq!(resumed[0].metrics, first[0].metrics);
        assert_eq!(resumed[1].metrics, first[1].metrics);
        assert_eq!(resumed[2].metrics["val_nll"], -123.0);
        // Ledger holds exactly the three rows: nothing was retrained.
        let scan = ledger.scan::<ModelRecord>().unwrap();
        assert_eq!(scan.rows.len(), 3);
        assert_eq!(scan.skipped, 0);
    }

    #[test]
    fn diverged_trials_become_failed_records() {
        let (spec, schema, mut plan, loss, _, _) = quick_ctx_parts();
        // Overlapping classes keep misclassified rows in every batch, so the
        // oversized steps compound until the forward pass overflows.
        let data = TaskData::from_dataset(&synth(
            &SynthKind::TwoGaussians {
                separation: 0.2,
                nuisance_dims: 0,
            },
            80,
            1,
        ));
        plan.epochs = 4;
        plan.param_opt = OptimizerSpec::sgd(1e14, 0.0);
        let ctx = SearchCtx {
            spec: &spec,
            schema: &schema,
            plan: &plan,
            loss: &loss,
            data: &data,
            test: None,
            workers: 2,
            ledger: None,
            ckpt_dir: None,
        };
        let recs = rand_search(&ctx, 2, 3).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert!(!r.is_ok());
            assert!(r.val_predictions.is_none());
            r.check().unwrap();
        }
        let labels = ctx.val_labels().unwrap();
        assert!(matches!(
            hyper_ens(&recs, 1, &labels, ScoreKind::Nll),
            Err(SelectError::NoUsableRecords)
        ));
    }

    #[test]
    fn stratification_counts_and_provenance() {
        let (spec, schema, plan, loss, data, _) = quick_ctx_parts();
        let dir = tempfile::tempdir().unwrap();
        let ctx = SearchCtx {
            spec: &spec,
            schema: &schema,
            plan: &plan,
            loss: &loss,
            data: &data,
            test: None,
            workers: 2,
            ledger: None,
            ckpt_dir: Some(dir.path()),
        };
        let k = 2;
        let kappa = 4;
        let out = hyper_deep_ens(&ctx, k, kappa, 19, true, ScoreKind::Nll).unwrap();
        let unique0 = out.first.unique();
        assert!(unique0 >= 1 && unique0 <= k);
        assert_eq!(out.stratified.len(), unique0 * k);
        assert_eq!(out.provenance.len(), unique0 * k);
        assert_eq!(out.trained, kappa + unique0 * (k - 1));
        for p in &out.provenance {
            let r = out.stratified.iter().find(|r| r.id == p.id).unwrap();
            let orig_id = out.first.members[p.row].0;
            let orig = out.search.iter().find(|r| r.id == orig_id).unwrap();
            assert_eq!(r.lambda, orig.lambda, "stratified rows share the row's draw");
            assert_eq!(p.reused, p.col == 0);
            if p.reused {
                assert_eq!(p.id, orig_id);
            } else {
                assert!(p.id >= kappa);
            }
        }
        // Each row holds k distinct seeds.
        for row in 0..unique0 {
            let seeds: std::collections::BTreeSet<u64> = out
                .provenance
                .iter()
                .filter(|p| p.row == row)
                .map(|p| out.stratified.iter().find(|r| r.id == p.id).unwrap().init_seed)
                .collect();
            assert_eq!(seeds.len(), k);
        }
        assert!(out.selection.unique() <= k);
        // Checkpoints were written for usable trained models.
        for r in &out.stratified {
            if r.is_ok() {
                let name = r.checkpoint.as_ref().unwrap();
                assert!(dir.path().join(name).exists());
            }
        }

        let no_reuse = hyper_deep_ens(&ctx, k, kappa, 19, false, ScoreKind::Nll).unwrap();
        assert_eq!(
            no_reuse.trained,
            kappa + no_reuse.first.unique() * k
        );
        for p in &no_reuse.provenance {
            assert!(!p.reused);
            assert!(p.id >= kappa);
        }
    }

    #[test]
    fn single_target_degenerates_to_the_best_search_model() {
        let (spec, schema, plan, loss, data, _) = quick_ctx_parts();
        let ctx = SearchCtx {
            spec: &spec,
            schema: &schema,
            plan: &plan,
            loss: &loss,
            data: &data,
            test: None,
            workers: 1,
            ledger: None,
            ckpt_dir: None,
        };
        let out = hyper_deep_ens(&ctx, 1, 3, 23, true, ScoreKind::Nll).unwrap();
        let labels = ctx.val_labels().unwrap();
        let best = out
            .search
            .iter()
            .filter(|r| r.is_ok())
            .min_by(|a, b| {
                let sa = ScoreKind::Nll.of(a.val_predictions.as_ref().unwrap().view(), &labels);
                let sb = ScoreKind::Nll.of(b.val_predictions.as_ref().unwrap().view(), &labels);
                sa.partial_cmp(&sb).unwrap()
            })
            .unwrap();
        assert_eq!(out.first.members, vec![(best.id, 1)]);
        // The stratified pool is that model alone (reused), so the final
        // selection is the same single model.
        assert_eq!(out.stratified.len(), 1);
        assert_eq!(out.selection.members, vec![(best.id, 1)]);
        assert_eq!(out.trained, 3);
    }

    #[test]
    fn tiny_box_collapses_to_one_hyperparameter() {
        // A near-degenerate box makes every draw the same value up to the
        // box width, so stratification varies only the seeds.
        let (spec, _, plan, loss, data, _) = quick_ctx_parts();
        let lo = 1e-3;
        let hi = lo * 2e-4f64.exp();
        let schema = HyperSchema::new(vec![SchemaEntry {
            name: "l2".into(),
            kind: HyperKind::L2Weights,
            scope: Scope::Global,
            lower: lo,
            upper: hi,
        }])
        .unwrap();
        let ctx = SearchCtx {
            spec: &spec,
            schema: &schema,
            plan: &plan,
            loss: &loss,
            data: &data,
            test: None,
            workers: 2,
            ledger: None,
            ckpt_dir: None,
        };
        let out = hyper_deep_ens(&ctx, 2, 2, 31, false, ScoreKind::Nll).unwrap();
        for r in out.search.iter().chain(&out.stratified) {
            assert!(r.lambda[0] >= lo && r.lambda[0] <= hi);
        }
        // Every stratified member of a row shares its hyperparameters
        // exactly, so a plain seed ensemble over that row is well defined
        // and draws from the same pool the final selection used.
        let labels = ctx.val_labels().unwrap();
        let row0 = &out.search.iter().find(|r| r.id == out.first.members[0].0).unwrap().lambda;
        let col = deep_ens(&out.stratified, row0, 2, &labels, ScoreKind::Nll);
        if out.first.unique() >= 1 {
            let col = col.unwrap();
            assert_eq!(col.unique(), 2);
        }
        let probs = super::super::selection_probs(&out.stratified, &out.selection, PredSet::Val)
            .unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    use super::super::deep_ens;
}
