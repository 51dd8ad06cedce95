//! Ensembles over hyperparameters, end to end.
//!
//! The crate trains neural networks whose weights are conditioned on
//! hyperparameter values, tunes distributions over those hyperparameters on
//! validation data, and greedily composes ensembles from pools of trained
//! models. The pieces, bottom up:
//!
//! - [`diffcore`]: tape-based reverse-mode autodiff, optimizers, gradient
//!   checking, keyed RNG streams.
//! - [`hyperdist`]: log-uniform distributions over bounded hyperparameters,
//!   with reparametrized sampling, closed-form entropy and mean, and
//!   feasibility projection.
//! - [`ensemble_layers`]: dense and convolution layers that hold several
//!   ensemble members in one matrix via rank-1 modulation, optionally
//!   conditioned on hyperparameter values through a learned embedding.
//! - [`objectives`]: cross entropy with label smoothing, per-member and
//!   ensemble losses, the vectorized L2 penalty, and the validation
//!   objective that trades fit against distribution entropy.
//! - [`trainer`]: fixed-hyperparameter training and the alternating loop
//!   that interleaves weight updates with distribution-bound updates.
//! - [`selection`]: greedy ensemble composition with replacement, plus the
//!   stratified pipeline that re-trains selected hyperparameters under
//!   multiple seeds.
//! - [`metrics`]: NLL, accuracy, Brier, calibration error, ensemble
//!   diversity, and shift-detection metrics.
//! - [`bestresponse`]: ridge/logistic diagnostics that measure how well a
//!   learned embedding tracks the exact best response per hyperparameter.
//! - [`datastore`]: datasets (synthetic and IDX), binary checkpoints, the
//!   append-only results ledger, and experiment configuration.

pub mod bestresponse;
pub mod datastore;
pub mod diffcore;
pub mod ensemble_layers;
pub mod hyperdist;
pub mod metrics;
pub mod objectives;
pub mod selection;
pub mod trainer;

pub use bestresponse::{
    bound_check, data_grad, data_loss, embedding_moments_min_eig, fit_bestresponse, gap_report,
    grad_lipschitz, optimality_residual, regress_best_response, ridge_closed_form,
    BestResponseError, BoundCheck, FeatureTransform, GapReport, GapRow, LowRankSelfTuningDense,
    PolyEmbedding, ResponseFit, ResponseFitPlan, ResponseLoss, RidgeProblem, Support,
    COND_LIMIT, OBJECTIVE_WINDOW,
};
pub use datastore::{
    checkpoint_load, checkpoint_save, dataset_from_idx, dists_from_arrays, dists_to_arrays,
    load_config, load_idx, parse_config, restore_store, scan, split_indices, store_to_arrays,
    synth, ConfigError, DataConfig, DataError, Dataset, ExperimentConfig, IdxPart, Ledger, Scan,
    SearchConfig, SynthKind, CHECKPOINT_VERSION,
};
pub use diffcore::{
    grad_check, stream_rng, DiffError, Gradients, OptimizerSpec, OptimizerState, Padding,
    ParamGroup, ParamStore, Tape, Tensor, Var,
};
pub use ensemble_layers::{
    BatchEnsConv2d, BatchEnsDense, DropMode, EmbeddingArch, EmbeddingNet, EmbeddingPair,
    HyperBatchConv2d, HyperBatchDense, HyperLayerConfig, LayerError, PlainConv2d, PlainDense,
    Rank1Init, StnConv2d, StnDense,
};
pub use metrics::{
    argmax_rows, basic_metrics, diversity, ece, metric_report, ood_metrics, EceBin, MetricReport,
    DEFAULT_ECE_BINS,
};
pub use objectives::{
    ensemble_nll, ensemble_nll_graph, entropy_graph, gibbs_loss, gibbs_loss_graph, l2_hyper_conv,
    l2_hyper_dense, l2_plain, l2_stn_dense, smoothed_xent, smoothed_xent_graph,
    validation_objective, validation_objective_graph, EnsembleNll, L2Inputs, PROB_CLAMP,
};
pub use hyperdist::{
    DistError, HyperKind, HyperSchema, MemberDistribution, SampleBatch, SchemaEntry, Scope,
    MIN_LOG_WIDTH,
};
pub use selection::{
    deep_ens, fixed_init_hyper_ens, hyper_deep_ens, hyper_ens, rand_search, selection_probs,
    top_k_select, EnsembleSelection, HyperDeepResult, ModelRecord, PredSet, Provenance,
    RecordStatus, ScoreKind, SearchCtx, SelectError, GREEDY_PICK_FACTOR, PROB_ROW_TOL,
};
pub use trainer::{
    build_network, fit_hyper_batch, initial_distributions, train_fixed, Activation, BoundLogRow,
    EpochStats, FitState, FitStatus, GroupScales, L2Map, LambdaSummary, LayerL2, LossConfig,
    LossKind, ModelSpec, NetLayers, Network, StepCounts, StepReport, Targets, TaskData,
    TrainError, TrainPlan, TrainedModel,
};
