use ndarray::{Axis, Ix2, Ix4};

use super::conv;
use super::DiffError;

/// Dense `f64` tensor with runtime-known rank. Scalars are rank 0.
pub type Tensor = ndarray::ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position of the node on its tape.
    pub fn id(self) -> usize {
        self.0
    }
}

/// Padding scheme for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output is `(in - kernel) / stride + 1` per spatial dim.
    Valid,
    /// Zero padding chosen so the output covers `ceil(in / stride)`.
    Same,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    LogSoftmax(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    SelectPerRow(Var, Vec<usize>),
    Reshape(Var),
    TileRows(Var, usize),
    Conv2d {
        x: Var,
        kernel: Var,
        pad: Padding,
        stride: usize,
    },
    ArgmaxRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MatMul(..) => "matmul",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::SelectPerRow(..) => "select_per_row",
            Op::Reshape(..) => "reshape",
            Op::TileRows(..) => "tile_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ArgmaxRows(..) => "argmax_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::LogSoftmax(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::TileRows(a, _)
            | Op::ArgmaxRows(a) => vec![a],
            Op::GatherRows(a, _) | Op::SelectPerRow(a, _) => vec![a],
            Op::Conv2d { x, kernel, .. } => vec![x, kernel],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by the [`Var`]s of the source tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output with respect to `v`, if one was
    /// accumulated. Constants and nodes cut off by non-differentiable ops
    /// have none.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros of the given shape for
    /// absent gradients.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Record of one forward computation.
///
/// Node values are retained, so intermediate results can be read back with
/// [`Tape::value`] after the graph is built. Every op validates shapes when
/// recorded and rejects non-finite outputs immediately, so a diverging
/// computation fails at the op that produced it rather than at the loss.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        debug_assert_eq!(t.len(), 1);
        *t.iter().next().expect("scalar node is non-empty")
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// Leaf treated as data: no gradient is accumulated for it or through it
    /// alone.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, value, false)
    }

    /// Convenience scalar constant.
    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, DiffError> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = !matches!(op, Op::ArgmaxRows(..))
            && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            self.mismatch(
                name,
                format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
            )
        })?;
        let av = va.broadcast(shape.clone()).expect("validated broadcast");
        let bv = vb.broadcast(shape.clone()).expect("validated broadcast");
        let mut out = Tensor::zeros(shape);
        ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = f(x, y));
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let out = self.nodes[a.0].value.mapv(f);
        self.push(op, out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, |x| x.max(c), Op::ClampMin(a, c))
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (a2, b2) = match (
            va.view().into_dimensionality::<Ix2>(),
            vb.view().into_dimensionality::<Ix2>(),
        ) {
            (Ok(a2), Ok(b2)) => (a2, b2),
            _ => {
                let detail = format!("expects rank 2, got {:?} and {:?}", va.shape(), vb.shape());
                return Err(self.mismatch("matmul", detail));
            }
        };
        if a2.ncols() != b2.nrows() {
            let detail = format!("inner dims differ: {:?} x {:?}", a2.dim(), b2.dim());
            return Err(self.mismatch("matmul", detail));
        }
        let out = a2.dot(&b2).into_dyn();
        self.push(Op::MatMul(a, b), out)
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        self.push(Op::Sum(a), out)
    }

    /// Mean of all elements, as a rank-0 node.
    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn rows_view(&self, name: &'static str, a: Var) -> Result<ndarray::ArrayView2<'_, f64>, DiffError> {
        self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| {
                self.mismatch(
                    name,
                    format!("expects rank 2, got {:?}", self.nodes[a.0].value.shape()),
                )
            })
    }

    /// Row-wise log-softmax of a rank-2 node.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.rows_view("log_softmax", a)?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        self.push(Op::LogSoftmax(a), out.into_dyn())
    }

    /// Row-wise softmax of a rank-2 node.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.rows_view("softmax", a)?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(Op::Softmax(a), out.into_dyn())
    }

    /// `out[i, :] = a[idx[i], :]` for a rank-2 node. Rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let src = self.rows_view("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.nrows()) {
            return Err(DiffError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                limit: src.nrows(),
            });
        }
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), src.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&src.row(i));
        }
        self.push(Op::GatherRows(a, idx.to_vec()), out.into_dyn())
    }

    /// `out[i] = a[i, idx[i]]` for a rank-2 node; output is rank 1.
    pub fn select_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let src = self.rows_view("select_per_row", a)?;
        if idx.len() != src.nrows() {
            let detail = format!("{} indices for {} rows", idx.len(), src.nrows());
            return Err(self.mismatch("select_per_row", detail));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.ncols()) {
            return Err(DiffError::IndexOutOfBounds {
                op: "select_per_row",
                index: bad,
                limit: src.ncols(),
            });
        }
        let out = ndarray::Array1::from_iter(idx.iter().enumerate().map(|(r, &c)| src[[r, c]]));
        self.push(Op::SelectPerRow(a, idx.to_vec()), out.into_dyn())
    }

    /// Same elements, new shape. Element count must match.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let v = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if v.len() != n {
            let detail = format!("{:?} has {} elements, target {:?} has {}", v.shape(), v.len(), shape, n);
            return Err(self.mismatch("reshape", detail));
        }
        let out = v
            .clone()
            .into_shape_with_order(shape.to_vec())
            .expect("element count validated");
        self.push(Op::Reshape(a), out)
    }

    /// Stacks `k` copies of `a` along axis 0. With `a` of `b` rows the copy
    /// for block `j` occupies rows `j*b .. (j+1)*b`.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Result<Var, DiffError> {
        if k == 0 {
            return Err(self.mismatch("tile_rows", "k must be positive".into()));
        }
        let v = &self.nodes[a.0].value;
        if v.ndim() == 0 {
            return Err(self.mismatch("tile_rows", "input must have rank >= 1".into()));
        }
        let views: Vec<_> = (0..k).map(|_| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("same-shape views");
        self.push(Op::TileRows(a, k), out)
    }

    /// 2-d convolution over `x` of shape `(batch, h, w, c_in)` with a kernel
    /// of shape `(kh, kw, c_in, c_out)`, stride >= 1.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        pad: Padding,
        stride: usize,
    ) -> Result<Var, DiffError> {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| {
                self.mismatch(
                    "conv2d",
                    format!("input expects rank 4, got {:?}", self.nodes[x.0].value.shape()),
                )
            })?;
        let kv = self.nodes[kernel.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| {
                self.mismatch(
                    "conv2d",
                    format!(
                        "kernel expects rank 4, got {:?}",
                        self.nodes[kernel.0].value.shape()
                    ),
                )
            })?;
        let out = conv::forward(&xv, &kv, pad, stride)
            .map_err(|detail| self.mismatch("conv2d", detail))?;
        self.push(
            Op::Conv2d {
                x,
                kernel,
                pad,
                stride,
            },
            out.into_dyn(),
        )
    }

    /// Row-wise argmax indices of a rank-2 node, as `f64` values. Ties pick
    /// the lowest index. Not differentiable: gradients stop here.
    pub fn argmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.rows_view("argmax_rows", a)?;
        let out = ndarray::Array1::from_iter(x.rows().into_iter().map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as f64
        }));
        self.push(Op::ArgmaxRows(a), out.into_dyn())
    }

    /// Reverse pass from a scalar output. Consumes the tape's one backward
    /// budget; node values stay readable.
    pub fn backward(&mut self, out: Var) -> Result<Gradients, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        self.consumed = true;
        let out_val = &self.nodes[out.0].value;
        if out_val.len() != 1 {
            return Err(DiffError::NonScalarBackward {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(out_val.shape().to_vec()));
        for id in (0..=out.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().expect("checked above");
            for (target, contrib) in self.node_backward(id, &g) {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Whether `to` is reachable from `from` by following op inputs forward,
    /// through differentiable and non-differentiable ops alike.
    pub fn reaches(&self, from: Var, to: Var) -> bool {
        if from == to {
            return true;
        }
        let mut reach = vec![false; to.0 + 1];
        if from.0 > to.0 {
            return false;
        }
        reach[from.0] = true;
        for id in from.0 + 1..=to.0 {
            if self.nodes[id]
                .op
                .inputs()
                .iter()
                .any(|v| v.0 <= to.0 && reach[v.0])
            {
                reach[id] = true;
            }
        }
        reach[to.0]
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[id].op {
            Op::Leaf | Op::ArgmaxRows(..) => vec![],
            Op::Add(a, b) => vec![
                (a.0, reduce_to_shape(g, val(*a).shape())),
                (b.0, reduce_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (a.0, reduce_to_shape(g, val(*a).shape())),
                (b.0, reduce_to_shape(&g.mapv(|x| -x), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let bv = val(*b).broadcast(g.shape()).expect("forward broadcasted");
                let av = val(*a).broadcast(g.shape()).expect("forward broadcasted");
                vec![
                    (a.0, reduce_to_shape(&(g * &bv), val(*a).shape())),
                    (b.0, reduce_to_shape(&(g * &av), val(*b).shape())),
                ]
            }
            Op::Div(a, b) => {
                let bv = val(*b).broadcast(g.shape()).expect("forward broadcasted");
                let av = val(*a).broadcast(g.shape()).expect("forward broadcasted");
                let ga = g / &bv;
                let mut gb = Tensor::zeros(g.shape().to_vec());
                ndarray::Zip::from(&mut gb)
                    .and(g)
                    .and(&av)
                    .and(&bv)
                    .for_each(|o, &gg, &x, &y| *o = -gg * x / (y * y));
                vec![
                    (a.0, reduce_to_shape(&ga, val(*a).shape())),
                    (b.0, reduce_to_shape(&gb, val(*b).shape())),
                ]
            }
            Op::Neg(a) => vec![(a.0, g.mapv(|x| -x))],
            Op::Scale(a, c) => vec![(a.0, g.mapv(|x| c * x))],
            Op::AddConst(a) => vec![(a.0, g.clone())],
            Op::MatMul(a, b) => {
                let a2 = val(*a).view().into_dimensionality::<Ix2>().expect("validated");
                let b2 = val(*b).view().into_dimensionality::<Ix2>().expect("validated");
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul output");
                vec![
                    (a.0, g2.dot(&b2.t()).into_dyn()),
                    (b.0, a2.t().dot(&g2).into_dyn()),
                ]
            }
            Op::Exp(a) => vec![(a.0, g * &self.nodes[id].value)],
            Op::Ln(a) => vec![(a.0, g / val(*a))],
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                vec![(a.0, g * &y.mapv(|t| 1.0 - t * t))]
            }
            Op::Relu(a) => {
                let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            }
            Op::ClampMin(a, c) => {
                let mask = val(*a).mapv(|x| if x > *c { 1.0 } else { 0.0 });
                vec![(a.0, g * &mask)]
            }
            Op::Sum(a) => {
                let s = *g.iter().next().expect("scalar grad");
                vec![(a.0, Tensor::from_elem(val(*a).shape().to_vec(), s))]
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[id]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("validated");
                let g2 = g.view().into_dimensionality::<Ix2>().expect("same shape");
                let mut dx = g2.to_owned();
                for (mut drow, (grow, yrow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(g2.rows().into_iter().zip(y.rows()))
                {
                    let s: f64 = grow.sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &ly| *d -= ly.exp() * s);
                }
                vec![(a.0, dx.into_dyn())]
            }
            Op::Softmax(a) => {
                let y = self.nodes[id]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("validated");
                let g2 = g.view().into_dimensionality::<Ix2>().expect("same shape");
                let mut dx = ndarray::Array2::<f64>::zeros(y.raw_dim());
                for ((mut drow, grow), yrow) in
                    dx.rows_mut().into_iter().zip(g2.rows()).zip(y.rows())
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&grow)
                        .and(&yrow)
                        .for_each(|d, &gg, &yy| *d = yy * (gg - dot));
                }
                vec![(a.0, dx.into_dyn())]
            }
            Op::GatherRows(a, idx) => {
                let src_shape = val(*a).shape();
                let mut dsrc = ndarray::Array2::<f64>::zeros((src_shape[0], src_shape[1]));
                let g2 = g.view().into_dimensionality::<Ix2>().expect("gather output");
                for (o, &i) in idx.iter().enumerate() {
                    let mut row = dsrc.row_mut(i);
                    row += &g2.row(o);
                }
                vec![(a.0, dsrc.into_dyn())]
            }
            Op::SelectPerRow(a, idx) => {
                let src_shape = val(*a).shape();
                let mut dsrc = ndarray::Array2::<f64>::zeros((src_shape[0], src_shape[1]));
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().expect("select output");
                for (r, &c) in idx.iter().enumerate() {
                    dsrc[[r, c]] += g1[r];
                }
                vec![(a.0, dsrc.into_dyn())]
            }
            Op::Reshape(a) => {
                let back = g
                    .clone()
                    .into_shape_with_order(val(*a).shape().to_vec())
                    .expect("element count preserved");
                vec![(a.0, back)]
            }
            Op::TileRows(a, k) => {
                let b = val(*a).shape()[0];
                let mut acc = Tensor::zeros(val(*a).shape().to_vec());
                for j in 0..*k {
                    let block = g.slice_axis(Axis(0), ndarray::Slice::from(j * b..(j + 1) * b));
                    acc += &block;
                }
                vec![(a.0, acc)]
            }
            Op::Conv2d {
                x,
                kernel,
                pad,
                stride,
            } => {
                let xv = val(*x).view().into_dimensionality::<Ix4>().expect("validated");
                let kv = val(*kernel)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("validated");
                let g4 = g.view().into_dimensionality::<Ix4>().expect("conv output");
                let (dx, dk) = conv::backward(&xv, &kv, &g4, *pad, *stride);
                vec![(x.0, dx.into_dyn()), (kernel.0, dk.into_dyn())]
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Sums a broadcasted gradient back down to the shape it was expanded from.
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for i in 0..target.len() {
        if target[i] == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    debug_assert_eq!(out.shape(), target);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, arr1, arr2};

    fn t1(v: &[f64]) -> Tensor {
        arr1(v).into_dyn()
    }

    #[test]
    fn affine_forward_matches_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let w = tape.constant(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let b = tape.constant(t1(&[10.0, 20.0]));
        let xw = tape.matmul(x, w).unwrap();
        let y = tape.add(xw, b).unwrap();
        assert_eq!(
            tape.value(y),
            &arr2(&[[11.0, 22.0], [13.0, 24.0]]).into_dyn()
        );
    }

    #[test]
    fn relu_zeroes_negatives_only() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[-1.0, 0.0, 2.5]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &t1(&[0.0, 0.0, 2.5]));
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &t1(&[2.0, -4.0, 6.0]));
    }

    #[test]
    fn constant_only_graph_has_no_gradients() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarBackward { .. }));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(arr0(3.0).into_dyn());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(
            tape.backward(y).unwrap_err(),
            DiffError::TapeConsumed
        ));
    }

    #[test]
    fn matmul_shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = tape.constant(arr2(&[[1.0, 2.0]]).into_dyn());
        match tape.matmul(a, b).unwrap_err() {
            DiffError::ShapeMismatch { op, .. } => assert_eq!(op, "matmul"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_rejected_at_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[0.0]));
        match tape.ln(x).unwrap_err() {
            DiffError::NonFinite { op, .. } => assert_eq!(op, "ln"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn broadcast_add_row_vector_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.param(arr2(&[[10.0, 20.0]]).into_dyn());
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &arr2(&[[2.0, 2.0]]).into_dyn());
    }

    #[test]
    fn gather_rows_accumulates_repeated_rows() {
        let mut tape = Tape::new();
        let m = tape.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let g = tape.gather_rows(m, &[0, 0, 1]).unwrap();
        assert_eq!(
            tape.value(g),
            &arr2(&[[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]]).into_dyn()
        );
        let s = tape.sum(g).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(
            grads.get(m).unwrap(),
            &arr2(&[[2.0, 2.0], [1.0, 1.0]]).into_dyn()
        );
    }

    #[test]
    fn tile_rows_layout_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(arr2(&[[1.0], [2.0]]).into_dyn());
        let t = tape.tile_rows(x, 3).unwrap();
        assert_eq!(
            tape.value(t),
            &arr2(&[[1.0], [2.0], [1.0], [2.0], [1.0], [2.0]]).into_dyn()
        );
        let s = tape.sum(t).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &arr2(&[[3.0], [3.0]]).into_dyn());
    }

    #[test]
    fn select_per_row_picks_and_scatters() {
        let mut tape = Tape::new();
        let x = tape.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let sel = tape.select_per_row(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(sel), &t1(&[2.0, 3.0]));
        let s = tape.sum(sel).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(
            grads.get(x).unwrap(),
            &arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn()
        );
    }

    #[test]
    fn argmax_rows_breaks_ties_low_and_blocks_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(arr2(&[[0.5, 0.5], [0.1, 0.9]]).into_dyn());
        let a = tape.argmax_rows(x).unwrap();
        assert_eq!(tape.value(a), &t1(&[0.0, 1.0]));
        let s = tape.sum(a).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_prob_space() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let l = tape.log_softmax(x).unwrap();
        let probs = tape.value(l).mapv(f64::exp);
        let sums = probs.sum_axis(Axis(1));
        for &s in sums.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reaches_tracks_forward_connectivity() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0]));
        let y = tape.param(t1(&[2.0]));
        let z = tape.mul(x, x).unwrap();
        let s = tape.sum(z).unwrap();
        assert!(tape.reaches(x, s));
        assert!(!tape.reaches(y, s));
    }
}
