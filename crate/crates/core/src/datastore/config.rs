//! Experiment configuration: one TOML document describing data, model,
//! hyperparameter schema, training, and search, plus dotted-key overrides
//! (`train.epochs=9`) for sweeps. Unknown keys are rejected everywhere so a
//! typo fails the run instead of silently using a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::SynthKind;
use crate::hyperdist::{DistError, HyperKind, HyperSchema, SchemaEntry, Scope};
use crate::selection::ScoreKind;
use crate::trainer::{LossConfig, LossKind, ModelSpec, TrainPlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unreadable config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {key:?}: {why}")]
    BadOverride { key: String, why: String },
    #[error("schema: {0}")]
    Schema(#[from] DistError),
    #[error("config invalid: {0}")]
    Invalid(String),
}

/// Where the task's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// A deterministic synthetic task.
    Synth {
        task: SynthKind,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    /// IDX image/label pairs; the test pair is optional.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

/// Ensemble construction knobs shared by the search-style commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Ensemble size.
    pub k: usize,
    /// Random-search budget.
    pub kappa: usize,
    /// Whether the stratified pass reuses each already-trained model as its
    /// own first seed instead of retraining it.
    pub reuse_originals: bool,
    /// Experiment repetitions; each seed drives one independent run.
    pub seeds: Vec<u64>,
    pub score: ScoreKind,
    /// Worker threads for trial training.
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 3,
            kappa: 20,
            reuse_originals: true,
            seeds: vec![0],
            score: ScoreKind::Nll,
            workers: 1,
        }
    }
}

/// A full experiment: everything a command needs beyond its output paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    /// Tuned hyperparameters; order fixes the lambda vector layout.
    pub schema: Vec<SchemaEntry>,
    pub train: TrainPlan,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub search: SearchConfig,
}

impl ExperimentConfig {
    /// The validated schema. Call sites that need bounds or sampling go
    /// through this rather than the raw entry list.
    pub fn hyper_schema(&self) -> Result<HyperSchema, ConfigError> {
        Ok(HyperSchema::new(self.schema.clone())?)
    }

    /// Cross-field checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let schema = self.hyper_schema()?;
        let depth = self.model.n_layers();
        for entry in schema.entries() {
            if let Scope::Layer(i) = entry.scope {
                if i >= depth {
                    return Err(ConfigError::Invalid(format!(
                        "schema.{}: layer {i} out of range for a {depth}-layer model",
                        entry.name
                    )));
                }
            }
            if entry.kind == HyperKind::LabelSmoothing && self.loss.kind != LossKind::CrossEntropy
            {
                return Err(ConfigError::Invalid(format!(
                    "schema.{}: label smoothing needs a cross-entropy loss",
                    entry.name
                )));
            }
        }
        if self.model.in_dim == 0 || self.model.out_dim == 0 {
            return Err(ConfigError::Invalid("model dims must be positive".into()));
        }
        if self.search.k == 0 {
            return Err(ConfigError::Invalid("search.k must be >= 1".into()));
        }
        if self.search.kappa < self.search.k {
            return Err(ConfigError::Invalid(format!(
                "search.kappa ({}) smaller than search.k ({})",
                self.search.kappa, self.search.k
            )));
        }
        if self.search.seeds.is_empty() {
            return Err(ConfigError::Invalid("search.seeds must not be empty".into()));
        }
        if self.search.workers == 0 {
            return Err(ConfigError::Invalid("search.workers must be >= 1".into()));
        }
        if let DataConfig::Synth { n, .. } = &self.data {
            if *n == 0 {
                return Err(ConfigError::Invalid("data.n must be >= 1".into()));
            }
        }
        if let DataConfig::Idx {
            test_images,
            test_labels,
            ..
        } = &self.data
        {
            if test_images.is_some() != test_labels.is_some() {
                return Err(ConfigError::Invalid(
                    "data.test_images and data.test_labels come as a pair".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Parses a TOML document, applies dotted-key overrides, and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut value: toml::Value = toml::from_str(text)?;
    for raw in overrides {
        apply_override(&mut value, raw)?;
    }
    let config: ExperimentConfig = value.try_into()?;
    config.validate()?;
    Ok(config)
}

/// [`parse_config`] over a file on disk.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?, overrides)
}

/// One `key.path=value` override. The value is parsed as a TOML scalar or
/// inline structure; anything that does not parse is taken as a string.
/// Numeric path segments index arrays.
fn apply_override(root: &mut toml::Value, raw: &str) -> Result<(), ConfigError> {
    let bad = |why: &str| ConfigError::BadOverride {
        key: raw.to_string(),
        why: why.to_string(),
    };
    let (key, val_text) = raw.split_once('=').ok_or_else(|| bad("missing '='"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(bad("empty key"));
    }
    let value = parse_scalar(val_text.trim());

    let segments: Vec<&str> = key.split('.').collect();
    let mut cursor = root;
    for (pos, seg) in segments.iter().enumerate() {
        let last = pos + 1 == segments.len();
        match cursor {
            toml::Value::Table(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                cursor = map
                    .entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            toml::Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| bad("array segment must be an index"))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| bad("array index out of range"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                cursor = slot;
            }
            _ => return Err(bad("path passes through a scalar")),
        }
    }
    unreachable!("loop returns on the last segment");
}

fn parse_scalar(text: &str) -> toml::Value {
    // Reuse the TOML grammar itself for typing: integers, floats, booleans,
    // arrays, and inline tables all round-trip through a one-entry document.
    let probe = format!("v = {text}");
    match toml::from_str::<toml::Value>(&probe) {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("probe key"),
        _ => toml::Value::String(text.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Activation;

    const BASE: &str = r#"
[data]
source = "synth"
n = 400
seed = 7

[data.task]
kind = "two_gaussians"
separation = 6.0
nuisance_dims = 4

[model]
in_dim = 6
out_dim = 2
hidden = [16]
activation = "relu"

[[schema]]
name = "l2w"
kind = "l2_weights"
lower = 1e-6
upper = 1e2

[[schema]]
name = "smooth"
kind = "label_smoothing"
lower = 1e-3
upper = 0.2

[train]
epochs = 4
batch_size = 32
seed = 3

[search]
k = 2
kappa = 5
seeds = [0, 1]
"#;

    #[test]
    fn full_document_parses_with_defaults() {
        let c = parse_config(BASE, &[]).unwrap();
        assert_eq!(c.model.hidden, vec![16]);
        assert_eq!(c.model.activation, Activation::Relu);
        assert_eq!(c.schema.len(), 2);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.batch_size, 32);
        // Unstated sections and fields take their defaults.
        assert_eq!(c.loss.kind, LossKind::CrossEntropy);
        assert!(c.search.reuse_originals);
        assert_eq!(c.search.workers, 1);
        assert_eq!(c.search.seeds, vec![0, 1]);
        match &c.data {
            DataConfig::Synth { task, n, seed } => {
                assert_eq!(*n, 400);
                assert_eq!(*seed, 7);
                assert_eq!(
                    *task,
                    SynthKind::TwoGaussians {
                        separation: 6.0,
                        nuisance_dims: 4
                    }
                );
            }
            other => panic!("wrong data config: {other:?}"),
        }
        c.hyper_schema().unwrap();
    }

    #[test]
    fn serialization_round_trips() {
        let c = parse_config(BASE, &[]).unwrap();
        let text = toml::to_string(&c).unwrap();
        let back = parse_config(&text, &[]).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let doc = BASE.replace("epochs = 4", "epochs = 4\nwarmup = 2");
        let err = parse_config(&doc, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warmup"), "error does not name the key: {msg}");
        let nested = BASE.replace("separation = 6.0", "separation = 6.0\nsep = 1.0");
        assert!(parse_config(&nested, &[]).is_err());
    }

    #[test]
    fn overrides_rewrite_typed_values() {
        let c = parse_config(
            BASE,
            &[
                "train.epochs=9".into(),
                "search.kappa=12".into(),
                "model.activation=tanh".into(),
                "loss.tau=0.01".into(),
                "schema.0.lower=1e-5".into(),
                "search.seeds=[3, 4, 5]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.search.kappa, 12);
        assert_eq!(c.model.activation, Activation::Tanh);
        assert_eq!(c.loss.tau, 0.01);
        assert_eq!(c.schema[0].lower, 1e-5);
        assert_eq!(c.search.seeds, vec![3, 4, 5]);
    }

    #[test]
    fn bad_overrides_are_typed_errors() {
        // Wrong value type for the field.
        assert!(parse_config(BASE, &["train.epochs=banana".into()]).is_err());
        // Key that the schema does not know.
        assert!(parse_config(BASE, &["train.warmup=2".into()]).is_err());
        // Structural misuse.
        let shapes = [
            "no_equals_sign",
            "=5",
            "schema.x.lower=1.0",
            "schema.9.lower=1.0",
            "train.epochs.deep=1",
        ];
        for s in shapes {
            let err = parse_config(BASE, &[s.to_string()]).unwrap_err();
            assert!(
                matches!(err, ConfigError::BadOverride { .. }) || matches!(err, ConfigError::Parse(_)),
                "override {s:?} gave {err:?}"
            );
        }
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        // Layer scope beyond the model depth.
        let scoped = BASE.replace(
            "kind = \"l2_weights\"",
            "kind = \"l2_weights\"\nscope = { layer = 7 }",
        );
        let err = parse_config(&scoped, &[]).unwrap_err();
        assert!(err.to_string().contains("layer 7"), "{err}");
        // Label smoothing without cross entropy.
        let err = parse_config(BASE, &["loss.kind=squared_error".into()]).unwrap_err();
        assert!(err.to_string().contains("label smoothing"), "{err}");
        // kappa below k.
        assert!(parse_config(BASE, &["search.kappa=1".into()]).is_err());
        // Degenerate counts.
        assert!(parse_config(BASE, &["search.k=0".into()]).is_err());
        assert!(parse_config(BASE, &["search.seeds=[]".into()]).is_err());
        assert!(parse_config(BASE, &["search.workers=0".into()]).is_err());
        assert!(parse_config(BASE, &["data.n=0".into()]).is_err());
        // Duplicate schema names surface the schema error.
        let dup = BASE.replace("name = \"smooth\"", "name = \"l2w\"");
        assert!(matches!(
            parse_config(&dup, &[]).unwrap_err(),
            ConfigError::Schema(DistError::DuplicateName(_))
        ));
    }

    #[test]
    fn idx_source_requires_paired_test_files() {
        let doc = r#"
[data]
source = "idx"
images = "train-images"
labels = "train-labels"
test_images = "t10k-images"

[model]
in_dim = 4
out_dim = 2

[[schema]]
name = "l2w"
kind = "l2_weights"
lower = 1e-6
upper = 1e2

[train]
epochs = 1
"#;
        let err = parse_config(doc, &[]).unwrap_err();
        assert!(err.to_string().contains("pair"), "{err}");
        let fixed = format!("{doc}\n[data.replaced]\n");
        // Adding an unknown table is still an error, proving deny applies
        // to the enum variant too.
        assert!(parse_config(&fixed, &[]).is_err());
        let ok = doc.replace(
            "test_images = \"t10k-images\"",
            "test_images = \"t10k-images\"\ntest_labels = \"t10k-labels\"",
        );
        let c = parse_config(&ok, &[]).unwrap();
        match c.data {
            DataConfig::Idx { test_labels, .. } => assert!(test_labels.is_some()),
            other => panic!("wrong data config: {other:?}"),
        }
    }
}
