//! Training loops.
//!
//! Two entry points. [`train_fixed`] minimizes the regularized loss of a
//! plain model under one fixed hyperparameter vector; the vector enters
//! through the penalty strengths, the dropout rate, and label smoothing,
//! never through the architecture. [`fit_hyper_batch`] trains a
//! member-conditioned model under sampled hyperparameters and alternates
//! weight updates with updates to each member's log-uniform bounds: a
//! warm-up phase of weight steps only, then `train_steps_per_tune` weight
//! steps per bound step.
//!
//! Randomness is stream-keyed per purpose (layer init, batch order, sample
//! draws), so runs reproduce bit for bit per seed and the fixed and
//! conditioned paths can be compared step by step.

mod loops;
mod net;

pub use loops::{fit_hyper_batch, train_fixed, FitState, StepReport};
pub(crate) use loops::check_data;
pub use net::{build_network, L2Map, LayerL2, NetLayers, Network};

use ndarray::Array2;

use crate::datastore::Dataset;
use crate::diffcore::{DiffError, OptimizerSpec, ParamGroup, ParamStore};
use crate::ensemble_layers::{HyperLayerConfig, LayerError};
use crate::hyperdist::{DistError, HyperKind, HyperSchema, MemberDistribution};

/// Nonlinearity between dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Dense stack shape plus the per-layer conditioning knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Hidden widths; empty means a single dense layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub layer: HyperLayerConfig,
}

impl ModelSpec {
    /// `(in, out)` of each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.in_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.out_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Data-fit term of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Fallback smoothing when the schema carries no smoothing entry.
    pub label_smoothing: f64,
    /// Entropy weight in the bound-tuning objective.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            label_smoothing: 0.0,
            tau: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::BadPlan("label_smoothing outside [0, 1)"));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(TrainError::BadPlan("tau must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Learning-rate multipliers per parameter group. Zero freezes a group; the
/// unconditioned submodel is recovered by freezing `rank1` (the member
/// factors stay at their unit initialization).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupScales {
    pub weights: f64,
    pub rank1: f64,
    pub bias: f64,
    pub embedding: f64,
}

impl Default for GroupScales {
    fn default() -> Self {
        GroupScales {
            weights: 1.0,
            rank1: 1.0,
            bias: 1.0,
            embedding: 1.0,
        }
    }
}

impl GroupScales {
    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Weights => self.weights,
            ParamGroup::Rank1 => self.rank1,
            ParamGroup::Bias => self.bias,
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Bounds => 1.0,
        }
    }

    fn valid(&self) -> bool {
        [self.weights, self.rank1, self.bias, self.embedding]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs of weight-only steps before bound tuning starts.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// Weight steps per bound step once past warm-up.
    #[serde(default = "default_ratio")]
    pub train_steps_per_tune: usize,
    #[serde(default = "default_param_opt")]
    pub param_opt: OptimizerSpec,
    #[serde(default = "default_bound_opt")]
    pub bound_opt: OptimizerSpec,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of the data used for training; the rest is validation.
    #[serde(default = "default_split")]
    pub split: f64,
    /// Seed for the train/validation split alone. Defaults to `seed`;
    /// search drivers pin it so every trial scores the same held-out rows.
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub scales: GroupScales,
}

fn default_batch() -> usize {
    256
}
fn default_warmup() -> usize {
    5
}
fn default_ratio() -> usize {
    2
}
fn default_param_opt() -> OptimizerSpec {
    OptimizerSpec::adam(1e-4)
}
fn default_bound_opt() -> OptimizerSpec {
    OptimizerSpec::adam(5e-4)
}
fn default_split() -> f64 {
    0.8
}

impl TrainPlan {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainPlan {
            epochs,
            batch_size,
            warmup_epochs: default_warmup(),
            train_steps_per_tune: default_ratio(),
            param_opt: default_param_opt(),
            bound_opt: default_bound_opt(),
            seed,
            split: default_split(),
            split_seed: None,
            scales: GroupScales::default(),
        }
    }

    /// Seed that decides the train/validation split.
    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadPlan("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadPlan("batch_size must be >= 1"));
        }
        if self.train_steps_per_tune == 0 {
            return Err(TrainError::BadPlan("train_steps_per_tune must be >= 1"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(TrainError::BadPlan("split must lie strictly in (0, 1)"));
        }
        if !self.scales.valid() {
            return Err(TrainError::BadPlan("group scales must be finite and >= 0"));
        }
        Ok(())
    }
}

/// How a run ended. Divergence is data, not a crash: searches over bad
/// hyperparameters must survive the occasional blow-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-batch training loss (data term plus penalty).
    pub train_loss: f64,
    /// Validation NLL for classification, mean squared error otherwise.
    pub val_loss: f64,
}

/// One bound-trajectory sample. Epoch 0 is the initialization; epoch `e`
/// is the state after `e` full epochs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundLogRow {
    pub epoch: usize,
    pub member: usize,
    pub hyper_name: String,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
}

/// Step totals over a whole fit. `train` excludes warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct StepCounts {
    pub warmup_train: usize,
    pub train: usize,
    pub tune: usize,
}

/// The hyperparameters a finished model answers for: the fixed vector it
/// was trained under, or each member's distribution mean.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSummary {
    Fixed(Vec<f64>),
    PerMember(Vec<Vec<f64>>),
}

/// A finished (or abandoned) training run.
pub struct TrainedModel {
    pub status: FitStatus,
    pub net: Network,
    pub store: ParamStore,
    /// Final member distributions; `None` for fixed-hyperparameter runs.
    pub dists: Option<Vec<MemberDistribution>>,
    pub lambda: LambdaSummary,
    pub history: Vec<EpochStats>,
    pub bound_log: Vec<BoundLogRow>,
    pub steps: StepCounts,
    /// Eval-mode predictions on the validation split (members averaged,
    /// each at its distribution mean); `None` when the run diverged.
    pub val_predictions: Option<Array2<f64>>,
}

impl TrainedModel {
    pub fn is_ok(&self) -> bool {
        self.status == FitStatus::Ok
    }

    /// Eval-mode predictions on new rows: probabilities for classification,
    /// raw outputs otherwise. Conditioned members predict at their
    /// distribution means and average.
    pub fn predict(
        &self,
        schema: &HyperSchema,
        features: ndarray::ArrayView2<f64>,
    ) -> Result<Array2<f64>, TrainError> {
        let lambdas = match &self.lambda {
            LambdaSummary::Fixed(_) => None,
            LambdaSummary::PerMember(rows) => {
                let m = rows.first().map_or(0, |r| r.len());
                let mut arr = Array2::zeros((rows.len(), m));
                for (k, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        arr[[k, j]] = v;
                    }
                }
                Some(arr)
            }
        };
        self.net.predict(
            &self.store,
            schema,
            features,
            lambdas.as_ref().map(|a| a.view()),
        )
    }

    /// Per-member eval-mode predictions, each member at its distribution
    /// mean. Only conditioned runs carry members; fixed runs refuse.
    pub fn predict_members(
        &self,
        schema: &HyperSchema,
        features: ndarray::ArrayView2<f64>,
    ) -> Result<Vec<Array2<f64>>, TrainError> {
        let rows = match &self.lambda {
            LambdaSummary::Fixed(_) => return Err(TrainError::MissingLambda),
            LambdaSummary::PerMember(rows) => rows,
        };
        let m = rows.first().map_or(0, |r| r.len());
        let mut arr = Array2::zeros((rows.len(), m));
        for (k, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                arr[[k, j]] = v;
            }
        }
        self.net.predict_members(&self.store, schema, features, arr.view())
    }
}

/// Supervised rows in the form the loops consume.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub features: Array2<f64>,
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Array2<f64>),
}

impl TaskData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        TaskData {
            features: ds.features.clone(),
            targets: Targets::Classes {
                labels: ds.labels.clone(),
                classes: ds.classes,
            },
        }
    }

    /// Regression rows; `values` is `(n, out)`.
    pub fn regression(features: Array2<f64>, values: Array2<f64>) -> Self {
        assert_eq!(features.nrows(), values.nrows(), "row counts differ");
        TaskData {
            features,
            targets: Targets::Values(values),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output width the model must match: class count or value columns.
    pub fn out_dim(&self) -> usize {
        match &self.targets {
            Targets::Classes { classes, .. } => *classes,
            Targets::Values(v) => v.ncols(),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    /// Rows by index, in the given order.
    pub fn take(&self, idx: &[usize]) -> TaskData {
        let d = self.features.ncols();
        let features = Array2::from_shape_fn((idx.len(), d), |(i, j)| self.features[[idx[i], j]]);
        let targets = match &self.targets {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(v) => Targets::Values(Array2::from_shape_fn(
                (idx.len(), v.ncols()),
                |(i, j)| v[[idx[i], j]],
            )),
        };
        TaskData { features, targets }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    BadPlan(&'static str),
    #[error("{name} is scoped to layer {layer} but the model has {layers} dense layers")]
    ScopeOutOfRange {
        name: String,
        layer: usize,
        layers: usize,
    },
    #[error("schema binds {count} {kind:?} entries where this model consumes at most one")]
    DuplicateKind { kind: HyperKind, count: usize },
    #[error("two schema entries assign {kind:?} to layer {layer}")]
    DuplicateAssignment { kind: HyperKind, layer: usize },
    #[error("{name}: {kind:?} binds to the single site before the output layer; use global scope")]
    UnsupportedScope { name: String, kind: HyperKind },
    #[error("lambda[{dim}] = {value} outside the schema bounds [{lower}, {upper}]")]
    LambdaOutOfBounds {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("{what}: got {got}, want {want}")]
    ShapeMismatch {
        what: &'static str,
        got: usize,
        want: usize,
    },
    #[error("conditioned prediction needs one hyperparameter row per member")]
    MissingLambda,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl From<LayerError> for TrainError {
    fn from(e: LayerError) -> Self {
        match e {
            LayerError::Diff(d) => TrainError::Diff(d),
            other => TrainError::Diff(DiffError::ShapeMismatch {
                op: "layer",
                node: 0,
                detail: other.to_string(),
            }),
        }
    }
}

/// Starting bounds per member: the full schema range, optionally with the
/// penalty-strength ranges narrowed by one decade around their log-midpoint
/// (full width floors at the minimum feasible width).
pub fn initial_distributions(
    schema: &HyperSchema,
    members: usize,
    shrink_l2: bool,
) -> Vec<MemberDistribution> {
    let full = MemberDistribution::full(schema);
    if !shrink_l2 {
        return vec![full; members];
    }
    let mut lo = full.log_lower().to_vec();
    let mut hi = full.log_upper().to_vec();
    for (j, entry) in schema.entries().iter().enumerate() {
        if !matches!(entry.kind, HyperKind::L2Weights | HyperKind::L2Biases) {
            continue;
        }
        let mid = 0.5 * (lo[j] + hi[j]);
        let width = (hi[j] - lo[j] - std::f64::consts::LN_10).max(crate::hyperdist::MIN_LOG_WIDTH);
        lo[j] = mid - 0.5 * width;
        hi[j] = mid + 0.5 * width;
    }
    vec![MemberDistribution::from_log_bounds(&lo, &hi, schema); members]
}
