use super::tape::{Tape, Tensor, Var};

/// Coarse parameter grouping, used to scale learning rates per group and to
/// pick initialization rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Dense or convolution weight matrices and their modulation deltas.
    Weights,
    /// Per-member rank-1 scaling vectors.
    Rank1,
    /// Biases and bias deltas.
    Bias,
    /// Hyperparameter embedding weights.
    Embedding,
    /// Distribution bounds in log space.
    Bounds,
}

/// Ordered, named collection of trainable tensors.
///
/// The order is the identity of each parameter for the whole stack: optimizer
/// moment buffers, gradient slots, and checkpoint arrays all align by index.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        self.groups[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamGroup)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.groups)
            .map(|((n, v), &g)| (n.as_str(), v, g))
    }

    /// Copies every tensor onto the tape as a differentiable parameter,
    /// returning handles aligned with store indices.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Copies every tensor onto the tape as a constant. Used when a pass
    /// must not produce gradients for the model parameters.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect()
    }

    /// Total element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}
