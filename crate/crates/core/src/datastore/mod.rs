//! Datasets, persistence, and experiment plumbing.
//!
//! Submodules: [`dataset`] holds the in-memory dataset type, deterministic
//! splitting, and the synthetic generators; [`idx`] parses the big-endian
//! IDX image/label format; [`checkpoint`] is a checksummed binary container
//! for named f64 arrays; [`ledger`] is the append-only line-delimited
//! results file that random-search workers share; [`config`] is the TOML
//! experiment description the command-line driver consumes.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod idx;
pub mod ledger;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, dists_from_arrays, dists_to_arrays, restore_store,
    store_to_arrays, CHECKPOINT_VERSION,
};
pub use config::{load_config, parse_config, ConfigError, DataConfig, ExperimentConfig, SearchConfig};
pub use dataset::{split_indices, synth, Dataset, SynthKind};
pub use idx::{dataset_from_idx, load_idx, IdxPart};
pub use ledger::{scan, Ledger, Scan};

/// Failures across loading, parsing, and persistence.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad IDX magic 0x{got:08x}")]
    BadMagic { got: u32 },
    #[error("truncated file while reading {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint format version {got}, expected {want}")]
    VersionMismatch { got: u32, want: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint is missing array {name:?}")]
    MissingArray { name: String },
    #[error("array {name:?} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("label {label} at row {index} outside [0, {classes})")]
    BadLabel {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
