//! Model assembly and evaluation.
//!
//! A [`Network`] is a dense stack built from a [`ModelSpec`] in one of two
//! forms: plain layers for fixed-hyperparameter training, or conditioned
//! member layers for the alternating scheme. Both are built from the same
//! per-layer init streams, so the shared weight matrices start identical
//! across the two forms under one seed.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::diffcore::{stream_rng, ParamStore, Tape, Var};
use crate::ensemble_layers::{
    member_mean, row_dropout, tile_lambda_rows, tiled_members, DropMode, HyperBatchDense,
    PlainDense,
};
use crate::hyperdist::{HyperKind, HyperSchema, Scope};
use crate::objectives::{l2_hyper_dense, l2_plain, L2Inputs};

use super::{Activation, LossKind, ModelSpec, TrainError};

/// Schema columns feeding one layer's penalty strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerL2 {
    pub w_dim: Option<usize>,
    pub b_dim: Option<usize>,
}

/// Where each schema dimension acts on the model. A layer-scoped penalty
/// entry overrides the global one for its layer; a layer with neither is
/// simply unpenalized. Dropout and smoothing have a single site each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct L2Map {
    pub layers: Vec<LayerL2>,
    pub dropout_dim: Option<usize>,
    pub smoothing_dim: Option<usize>,
}

impl L2Map {
    pub fn from_schema(schema: &HyperSchema, n_layers: usize) -> Result<Self, TrainError> {
        let mut layers = vec![
            LayerL2 {
                w_dim: None,
                b_dim: None
            };
            n_layers
        ];
        let mut global_w = Vec::new();
        let mut global_b = Vec::new();
        let mut drops = Vec::new();
        let mut smooths = Vec::new();
        for (j, entry) in schema.entries().iter().enumerate() {
            match entry.kind {
                HyperKind::L2Weights | HyperKind::L2Biases => match entry.scope {
                    Scope::Layer(l) => {
                        if l >= n_layers {
                            return Err(TrainError::ScopeOutOfRange {
                                name: entry.name.clone(),
                                layer: l,
                                layers: n_layers,
                            });
                        }
                        let slot = if entry.kind == HyperKind::L2Weights {
                            &mut layers[l].w_dim
                        } else {
                            &mut layers[l].b_dim
                        };
                        if slot.is_some() {
                            return Err(TrainError::DuplicateAssignment {
                                kind: entry.kind,
                                layer: l,
                            });
                        }
                        *slot = Some(j);
                    }
                    Scope::Global => {
                        if entry.kind == HyperKind::L2Weights {
                            global_w.push(j);
                        } else {
                            global_b.push(j);
                        }
                    }
                },
                HyperKind::Dropout | HyperKind::LabelSmoothing => {
                    if matches!(entry.scope, Scope::Layer(_)) {
                        return Err(TrainError::UnsupportedScope {
                            name: entry.name.clone(),
                            kind: entry.kind,
                        });
                    }
                    if entry.kind == HyperKind::Dropout {
                        drops.push(j);
                    } else {
                        smooths.push(j);
                    }
                }
            }
        }
        for (kind, globals) in [
            (HyperKind::L2Weights, &global_w),
            (HyperKind::L2Biases, &global_b),
            (HyperKind::Dropout, &drops),
            (HyperKind::LabelSmoothing, &smooths),
        ] {
            if globals.len() > 1 {
                return Err(TrainError::DuplicateKind {
                    kind,
                    count: globals.len(),
                });
            }
        }
        for slot in &mut layers {
            if slot.w_dim.is_none() {
                slot.w_dim = global_w.first().copied();
            }
            if slot.b_dim.is_none() {
                slot.b_dim = global_b.first().copied();
            }
        }
        Ok(L2Map {
            layers,
            dropout_dim: drops.first().copied(),
            smoothing_dim: smooths.first().copied(),
        })
    }
}

#[derive(Debug, Clone)]
pub enum NetLayers {
    Plain(Vec<PlainDense>),
    Hyper(Vec<HyperBatchDense>),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: NetLayers,
    pub activation: Activation,
    pub kind: LossKind,
    /// Ensemble members held by the conditioned form; 1 for plain stacks.
    pub members: usize,
    pub map: L2Map,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Builds the stack and its parameters. `members: None` gives the plain
/// form. Each layer draws its init from its own keyed stream, first the
/// shared weight matrix, so plain and conditioned builds agree on it.
pub fn build_network(
    spec: &ModelSpec,
    schema: &HyperSchema,
    kind: LossKind,
    members: Option<usize>,
    seed: u64,
) -> Result<(ParamStore, Network), TrainError> {
    if spec.in_dim == 0 || spec.out_dim == 0 || spec.hidden.contains(&0) {
        return Err(TrainError::BadPlan("layer widths must be >= 1"));
    }
    if members == Some(0) {
        return Err(TrainError::BadPlan("member count must be >= 1"));
    }
    let map = L2Map::from_schema(schema, spec.n_layers())?;
    let mut store = ParamStore::new();
    let layers = match members {
        None => NetLayers::Plain(
            spec.layer_dims()
                .iter()
                .enumerate()
                .map(|(l, &(i, o))| {
                    let mut rng = stream_rng(seed, l as u64, "init");
                    PlainDense::new(&mut store, &format!("layer{l}"), i, o, &mut rng)
                })
                .collect(),
        ),
        Some(k) => NetLayers::Hyper(
            spec.layer_dims()
                .iter()
                .enumerate()
                .map(|(l, &(i, o))| {
                    let mut rng = stream_rng(seed, l as u64, "init");
                    HyperBatchDense::new(
                        &mut store,
                        &format!("layer{l}"),
                        i,
                        o,
                        k,
                        schema.len(),
                        &spec.layer,
                        &mut rng,
                    )
                })
                .collect(),
        ),
    };
    let net = Network {
        layers,
        activation: spec.activation,
        kind,
        members: members.unwrap_or(1),
        map,
        in_dim: spec.in_dim,
        out_dim: spec.out_dim,
    };
    Ok((store, net))
}

/// Per-batch context for [`Network::forward`]. Plain stacks ignore
/// `member` and `z`; `dropout` carries one rate per row and applies before
/// the output layer.
pub struct ForwardCtx<'a> {
    pub member: &'a [usize],
    pub z: Option<Var>,
    pub mode: DropMode,
    pub dropout: Option<&'a [f64]>,
}

impl Network {
    pub fn n_layers(&self) -> usize {
        match &self.layers {
            NetLayers::Plain(ls) => ls.len(),
            NetLayers::Hyper(ls) => ls.len(),
        }
    }

    fn activate(&self, tape: &mut Tape, h: Var) -> Result<Var, TrainError> {
        Ok(match self.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Tanh => tape.tanh(h)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        ctx: &ForwardCtx,
        rng: &mut impl Rng,
    ) -> Result<Var, TrainError> {
        let last = self.n_layers() - 1;
        let mut h = x;
        for l in 0..=last {
            if l == last {
                if let Some(rates) = ctx.dropout {
                    h = row_dropout(tape, h, rates, ctx.mode, rng)?;
                }
            }
            h = match &self.layers {
                NetLayers::Plain(ls) => ls[l].forward(tape, vars, h)?,
                NetLayers::Hyper(ls) => {
                    let z = ctx.z.ok_or(TrainError::MissingLambda)?;
                    ls[l].forward(tape, vars, h, ctx.member, z)?
                }
            };
            if l != last {
                h = self.activate(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Eval-mode forward pass over whole matrices: softmax probabilities
    /// for classification, raw outputs otherwise, members averaged. The
    /// conditioned form needs one hyperparameter row per member; the plain
    /// form ignores `lambdas`.
    pub fn predict(
        &self,
        store: &ParamStore,
        schema: &HyperSchema,
        features: ArrayView2<f64>,
        lambdas: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>, TrainError> {
        if features.ncols() != self.in_dim {
            return Err(TrainError::ShapeMismatch {
                what: "feature columns",
                got: features.ncols(),
                want: self.in_dim,
            });
        }
        let n = features.nrows();
        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let mut rng = stream_rng(0, 0, "predict");
        let ctx_dropout = None;
        let out = match &self.layers {
            NetLayers::Plain(_) => {
                let x = tape.constant(features.to_owned().into_dyn());
                let ctx = ForwardCtx {
                    member: &[],
                    z: None,
                    mode: DropMode::Eval,
                    dropout: ctx_dropout,
                };
                self.forward(&mut tape, &vars, x, &ctx, &mut rng)?
            }
            NetLayers::Hyper(_) => {
                let lam = lambdas.ok_or(TrainError::MissingLambda)?;
                if lam.nrows() != self.members || lam.ncols() != schema.len() {
                    return Err(TrainError::MissingLambda);
                }
                let mut z_rows = Array2::zeros((self.members, schema.len()));
                for (k, row) in lam.rows().into_iter().enumerate() {
                    let z = schema.normalize(row.as_slice().expect("contiguous row"));
                    for (j, v) in z.into_iter().enumerate() {
                        z_rows[[k, j]] = v;
                    }
                }
                let member = tiled_members(n, self.members);
                let x = tape.constant(features.to_owned().into_dyn());
                let x = tape.tile_rows(x, self.members)?;
                let z = tape.constant(tile_lambda_rows(z_rows.view(), n).into_dyn());
                let ctx = ForwardCtx {
                    member: &member,
                    z: Some(z),
                    mode: DropMode::Eval,
                    dropout: ctx_dropout,
                };
                let logits = self.forward(&mut tape, &vars, x, &ctx, &mut rng)?;
                let per_member = match self.kind {
                    LossKind::CrossEntropy => tape.softmax(logits)?,
                    LossKind::SquaredError => logits,
                };
                member_mean(&mut tape, per_member, n, self.members)?
            }
        };
        let out = match (&self.layers, self.kind) {
            (NetLayers::Plain(_), LossKind::CrossEntropy) => tape.softmax(out)?,
            _ => out,
        };
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank-2 output"))
    }

    /// Like [`Network::predict`] for the conditioned form, but keeps the K
    /// member outputs separate instead of averaging them. Element `k` holds
    /// member `k`'s eval-mode predictions at its own hyperparameter row.
    pub fn predict_members(
        &self,
        store: &ParamStore,
        schema: &HyperSchema,
        features: ArrayView2<f64>,
        lambdas: ArrayView2<f64>,
    ) -> Result<Vec<Array2<f64>>, TrainError> {
        if features.ncols() != self.in_dim {
            return Err(TrainError::ShapeMismatch {
                what: "feature columns",
                got: features.ncols(),
                want: self.in_dim,
            });
        }
        if matches!(self.layers, NetLayers::Plain(_)) {
            return Err(TrainError::MissingLambda);
        }
        if lambdas.nrows() != self.members || lambdas.ncols() != schema.len() {
            return Err(TrainError::MissingLambda);
        }
        let n = features.nrows();
        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let mut rng = stream_rng(0, 0, "predict");
        let mut z_rows = Array2::zeros((self.members, schema.len()));
        for (k, row) in lambdas.rows().into_iter().enumerate() {
            let z = schema.normalize(row.as_slice().expect("contiguous row"));
            for (j, v) in z.into_iter().enumerate() {
                z_rows[[k, j]] = v;
            }
        }
        let member = tiled_members(n, self.members);
        let x = tape.constant(features.to_owned().into_dyn());
        let x = tape.tile_rows(x, self.members)?;
        let z = tape.constant(tile_lambda_rows(z_rows.view(), n).into_dyn());
        let ctx = ForwardCtx {
            member: &member,
            z: Some(z),
            mode: DropMode::Eval,
            dropout: None,
        };
        let logits = self.forward(&mut tape, &vars, x, &ctx, &mut rng)?;
        let per_member = match self.kind {
            LossKind::CrossEntropy => tape.softmax(logits)?,
            LossKind::SquaredError => logits,
        };
        let tiled = tape
            .value(per_member)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank-2 output");
        Ok((0..self.members)
            .map(|k| tiled.slice(ndarray::s![k * n..(k + 1) * n, ..]).to_owned())
            .collect())
    }

    /// Penalty term for the conditioned form: mean over tiled rows of the
    /// per-row strengths applied to each member's composed weights. Rows
    /// with no mapped schema column contribute strength zero; `None` when
    /// no layer is penalized at all.
    pub fn l2_graph_hyper(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        member: &[usize],
        lambda: ArrayView2<f64>,
    ) -> Result<Option<Var>, TrainError> {
        let layers = match &self.layers {
            NetLayers::Hyper(ls) => ls,
            NetLayers::Plain(_) => return Ok(None),
        };
        let rows = member.len();
        let mut acc: Option<Var> = None;
        for (l, layer) in layers.iter().enumerate() {
            let slot = self.map.layers[l];
            if slot.w_dim.is_none() && slot.b_dim.is_none() {
                continue;
            }
            let col = |dim: Option<usize>| {
                Array2::from_shape_fn((rows, 1), |(i, _)| match dim {
                    Some(j) => lambda[[i, j]],
                    None => 0.0,
                })
            };
            let nu_w = tape.constant(col(slot.w_dim).into_dyn());
            let nu_b = tape.constant(col(slot.b_dim).into_dyn());
            let (e, eb) = layer.embeddings(tape, vars, z)?;
            let inp = L2Inputs {
                member,
                e,
                eb,
                nu_w,
                nu_b,
            };
            let term = l2_hyper_dense(tape, vars, layer, &inp)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc)
    }

    /// Penalty term for the plain form under one fixed vector.
    pub fn l2_graph_fixed(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        lambda: &[f64],
    ) -> Result<Option<Var>, TrainError> {
        let layers = match &self.layers {
            NetLayers::Plain(ls) => ls,
            NetLayers::Hyper(_) => return Ok(None),
        };
        let mut acc: Option<Var> = None;
        for (l, layer) in layers.iter().enumerate() {
            let slot = self.map.layers[l];
            for (dim, var) in [(slot.w_dim, layer.w), (slot.b_dim, layer.b)] {
                let Some(j) = dim else { continue };
                let term = l2_plain(tape, vars[var], lambda[j])?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
        }
        Ok(acc)
    }
}
