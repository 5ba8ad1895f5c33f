use std::rc::Rc;

use super::graph_ops::{NeighborSets, Propagation};
use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the input `x` and output `y`. The leaky ReLU kink at
    /// exactly zero takes the slope of the negative branch.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Activate(Var, Activation),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var, f64),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var, Vec<usize>),
    UpperTriangular(Var, usize),
    PairwiseSqDist(Var, Var),
    KernelMean(Var, Rc<[f64]>),
    Propagate(Var, Rc<Propagation>),
    Attention {
        wh: Var,
        src: Var,
        dst: Var,
        nbrs: Rc<NeighborSets>,
        slope: f64,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Activate(..) => "activate",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxRows(..) => "softmax",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::UpperTriangular(..) => "upper_triangular",
            Op::PairwiseSqDist(..) => "pairwise_sqdist",
            Op::KernelMean(..) => "kernel_mean",
            Op::Propagate(..) => "propagate",
            Op::Attention { .. } => "attention",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::PairwiseSqDist(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Activate(a, _)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a, _)
            | Op::SliceCols(a, ..)
            | Op::GatherRows(a, _)
            | Op::Reshape(a, _)
            | Op::UpperTriangular(a, _)
            | Op::KernelMean(a, _)
            | Op::Propagate(a, _) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Attention { wh, src, dst, .. } => vec![*wh, *src, *dst],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One entry of the computation record, for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Dynamic computation record for reverse-mode differentiation.
///
/// Every operation evaluates eagerly and appends one entry; entries are
/// topologically ordered by construction. A tape is built fresh for each
/// forward pass and is confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| RecordEntry {
                kind: n.op.kind(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    /// Smallest distance of any recorded input from a point where its op is
    /// not differentiable (leaky_relu and abs at 0, clamp at its bounds).
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            let (a, lo, hi) = match n.op {
                Op::Activate(a, Activation::LeakyRelu(_)) | Op::Abs(a) => (a, 0.0, 0.0),
                Op::Clamp(a, lo, hi) => (a, lo, hi),
                _ => continue,
            };
            for &v in self.nodes[a.0].value.data() {
                m = m.min((v - lo).abs()).min((v - hi).abs());
            }
        }
        m
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.evaluate(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Re-executes the record with some leaves replaced, returning a new tape.
    pub fn replay(&self, leaves: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Leaf => {
                    let value = leaves
                        .iter()
                        .find(|(v, _)| v.0 == i)
                        .map(|(_, t)| t.clone())
                        .unwrap_or_else(|| node.value.clone());
                    if value.shape() != node.value.shape() {
                        return Err(Error::dim("replay", node.value.shape(), value.shape()));
                    }
                    out.push_node(value, Op::Leaf, node.requires_grad);
                }
                op => {
                    out.push(op.clone())?;
                }
            }
        }
        Ok(out)
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c)).expect("scale is total")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::AddScalar(a, c)).expect("add_scalar is total")
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Var {
        self.push(Op::Activate(a, kind)).expect("activate is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a)).expect("exp is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a)).expect("square is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a)).expect("abs is total")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.push(Op::Clamp(a, lo, hi)).expect("clamp is total")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a)).expect("sum is total")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a)).expect("mean is total")
    }

    /// Row-wise `softmax(t · a)`.
    pub fn softmax_rows(&mut self, a: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {t}")));
        }
        self.push(Op::SoftmaxRows(a, t))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        self.push(Op::GatherRows(a, idx))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Builds a `p × p` strictly upper-triangular matrix from its
    /// `p(p-1)/2` free entries, listed row by row.
    pub fn upper_triangular(&mut self, entries: Var, p: usize) -> Result<Var> {
        self.push(Op::UpperTriangular(entries, p))
    }

    /// `D[i][j] = ‖a_i − b_j‖²` over rows.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::PairwiseSqDist(a, b))
    }

    /// `mean_ij Σ_b exp(−D[i][j] / b)` over the given bandwidths.
    pub fn kernel_mean(&mut self, d: Var, bandwidths: Rc<[f64]>) -> Result<Var> {
        self.push(Op::KernelMean(d, bandwidths))
    }

    /// Fixed sparse propagation applied to each block of `n_nodes` rows.
    pub fn propagate(&mut self, h: Var, prop: Rc<Propagation>) -> Result<Var> {
        self.push(Op::Propagate(h, prop))
    }

    /// Single-head attention aggregation. Logits are
    /// `leaky_relu(dst[v] + src[u])` over `u` in the neighbor set of `v`.
    pub fn attention(
        &mut self,
        wh: Var,
        src: Var,
        dst: Var,
        nbrs: Rc<NeighborSets>,
        slope: f64,
    ) -> Result<Var> {
        self.push(Op::Attention {
            wh,
            src,
            dst,
            nbrs,
            slope,
        })
    }

    // ---- forward ----------------------------------------------------------

    fn evaluate(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                let ((m, k), (k2, n)) = (a.dims(), b.dims());
                if k != k2 {
                    return Err(Error::dim("matmul", a.shape(), b.shape()));
                }
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), b.data(), &mut out);
                Tensor::matrix(m, n, out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                if x.shape() != y.shape() {
                    return Err(Error::dim(op.kind(), x.shape(), y.shape()));
                }
                let data = x.data().iter().zip(y.data());
                let data: Vec<f64> = match op {
                    Op::Add(..) => data.map(|(p, q)| p + q).collect(),
                    Op::Sub(..) => data.map(|(p, q)| p - q).collect(),
                    _ => data.map(|(p, q)| p * q).collect(),
                };
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let (x, row) = (val(a), val(r));
                let (rows, cols) = x.dims();
                if row.len() != cols {
                    return Err(Error::dim(op.kind(), x.shape(), row.shape()));
                }
                let mut data = x.data().to_vec();
                let add = matches!(op, Op::AddRow(..));
                for i in 0..rows {
                    for (o, &b) in data[i * cols..(i + 1) * cols].iter_mut().zip(row.data()) {
                        if add {
                            *o += b;
                        } else {
                            *o *= b;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => val(a).map(|x| x * c),
            Op::AddScalar(a, c) => val(a).map(|x| x + c),
            Op::Activate(a, kind) => val(a).map(|x| kind.apply(x)),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Square(a) => val(a).map(|x| x * x),
            Op::Abs(a) => val(a).map(f64::abs),
            Op::Clamp(a, lo, hi) => val(a).map(|x| x.clamp(*lo, *hi)),
            Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
            Op::Mean(a) => {
                let x = val(a);
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            Op::SoftmaxRows(a, t) => {
                let x = val(a);
                let (rows, cols) = x.dims();
                let mut data = vec![0.0; rows * cols];
                for i in 0..rows {
                    softmax_into(x.row_slice(i), *t, &mut data[i * cols..(i + 1) * cols]);
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::SliceCols(a, s, e) => {
                let x = val(a);
                let (rows, cols) = x.dims();
                if s >= e || *e > cols {
                    return Err(Error::dim("slice_cols", x.shape(), &[*s, *e]));
                }
                let w = e - s;
                let mut data = Vec::with_capacity(rows * w);
                for i in 0..rows {
                    data.extend_from_slice(&x.row_slice(i)[*s..*e]);
                }
                Tensor::matrix(rows, w, data)
            }
            Op::ConcatCols(parts) => {
                let first = parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
                let rows = val(first).rows();
                let mut total = 0;
                for p in parts {
                    if val(p).rows() != rows {
                        return Err(Error::dim("concat_cols", val(first).shape(), val(p).shape()));
                    }
                    total += val(p).cols();
                }
                let mut data = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for p in parts {
                        data.extend_from_slice(val(p).row_slice(i));
                    }
                }
                Tensor::matrix(rows, total, data)
            }
            Op::GatherRows(a, idx) => {
                let x = val(a);
                if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
                    return Err(Error::dim("gather_rows", x.shape(), &[bad]));
                }
                x.select_rows(idx)
            }
            Op::Reshape(a, shape) => {
                let x = val(a);
                if shape.iter().product::<usize>() != x.len() {
                    return Err(Error::dim("reshape", x.shape(), shape));
                }
                Tensor::new(shape.clone(), x.data().to_vec())?
            }
            Op::UpperTriangular(a, p) => {
                let x = val(a);
                if *p < 2 || x.len() != p * (p - 1) / 2 {
                    return Err(Error::dim("upper_triangular", x.shape(), &[*p, *p]));
                }
                let mut out = Tensor::zeros(&[*p, *p]);
                let mut k = 0;
                for i in 0..*p {
                    for j in i + 1..*p {
                        out.set(i, j, x.data()[k]);
                        k += 1;
                    }
                }
                out
            }
            Op::PairwiseSqDist(a, b) => {
                let (x, y) = (val(a), val(b));
                let ((n, d), (m, d2)) = (x.dims(), y.dims());
                if d != d2 {
                    return Err(Error::dim("pairwise_sqdist", x.shape(), y.shape()));
                }
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let xi = x.row_slice(i);
                    for j in 0..m {
                        out[i * m + j] = xi
                            .iter()
                            .zip(y.row_slice(j))
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum();
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::KernelMean(a, bws) => {
                let x = val(a);
                let s: f64 = x
                    .data()
                    .iter()
                    .map(|&d| bws.iter().map(|&b| (-d / b).exp()).sum::<f64>())
                    .sum();
                Tensor::scalar(s / x.len() as f64)
            }
            Op::Propagate(a, prop) => {
                let x = val(a);
                let (rows, cols) = x.dims();
                if rows % prop.n_nodes() != 0 {
                    return Err(Error::dim("propagate", x.shape(), &[prop.n_nodes()]));
                }
                let mut out = vec![0.0; rows * cols];
                prop.apply(x.data(), cols, &mut out);
                Tensor::matrix(rows, cols, out)
            }
            Op::Attention {
                wh,
                src,
                dst,
                nbrs,
                slope,
            } => {
                let (h, s, t) = (val(wh), val(src), val(dst));
                let (rows, cols) = h.dims();
                if rows % nbrs.n_nodes() != 0 || s.len() != rows || t.len() != rows {
                    return Err(Error::dim("attention", h.shape(), s.shape()));
                }
                let mut out = vec![0.0; rows * cols];
                let mut alpha = Vec::new();
                for block in 0..rows / nbrs.n_nodes() {
                    let base = block * nbrs.n_nodes();
                    for v in 0..nbrs.n_nodes() {
                        attention_weights(nbrs, base, v, s.data(), t.data(), *slope, &mut alpha);
                        let o = &mut out[(base + v) * cols..(base + v + 1) * cols];
                        for (&u, &w) in nbrs.neighbors(v).iter().zip(&alpha) {
                            for (oc, hc) in o.iter_mut().zip(h.row_slice(base + u)) {
                                *oc += w * hc;
                            }
                        }
                    }
                }
                Tensor::matrix(rows, cols, out)
            }
        })
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |v: &Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (val(a), val(b));
                let ((m, k), (_, n)) = (x.dims(), y.dims());
                // dA = G · Bᵀ
                self.acc(grads, *a, |da| {
                    gemm_strided(m, n, k, gd, (n as isize, 1), y.data(), (1, n as isize), da, 1.0)
                });
                // dB = Aᵀ · G
                self.acc(grads, *b, |db| {
                    gemm_strided(k, m, n, x.data(), (1, k as isize), gd, (n as isize, 1), db, 1.0)
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |da| add_into(da, gd, 1.0));
                self.acc(grads, *b, |db| add_into(db, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |da| add_into(da, gd, 1.0));
                self.acc(grads, *b, |db| add_into(db, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(a).data(), val(b).data());
                self.acc(grads, *a, |da| {
                    for ((d, gi), yi) in da.iter_mut().zip(gd).zip(y) {
                        *d += gi * yi;
                    }
                });
                self.acc(grads, *b, |db| {
                    for ((d, gi), xi) in db.iter_mut().zip(gd).zip(x) {
                        *d += gi * xi;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let cols = val(r).len();
                self.acc(grads, *a, |da| add_into(da, gd, 1.0));
                self.acc(grads, *r, |dr| {
                    for row in gd.chunks(cols) {
                        add_into(dr, row, 1.0);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (x, row) = (val(a).data(), val(r).data());
                let cols = row.len();
                self.acc(grads, *a, |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += gd[i] * row[i % cols];
                    }
                });
                self.acc(grads, *r, |dr| {
                    for (i, (gi, xi)) in gd.iter().zip(x).enumerate() {
                        dr[i % cols] += gi * xi;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |da| add_into(da, gd, *c)),
            Op::AddScalar(a, _) | Op::Reshape(a, _) => {
                self.acc(grads, *a, |da| add_into(da, gd, 1.0))
            }
            Op::Activate(a, kind) => {
                let (x, y) = (val(a).data(), node.value.data());
                self.acc(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * kind.derivative(x[i], y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * y[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = val(a).data();
                self.acc(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += 2.0 * gd[i] * x[i];
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(a).data();
                self.acc(grads, *a, |da| {
                    for i in 0..da.len() {
                        let s = if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        da[i] += gd[i] * s;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(a).data();
                self.acc(grads, *a, |da| {
                    for i in 0..da.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |da| da.iter_mut().for_each(|d| *d += gd[0])),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                self.acc(grads, *a, |da| da.iter_mut().for_each(|d| *d += gd[0] / n));
            }
            Op::SoftmaxRows(a, t) => {
                let y = &node.value;
                let cols = y.cols();
                self.acc(grads, *a, |da| {
                    for (i, (drow, grow)) in da.chunks_mut(cols).zip(gd.chunks(cols)).enumerate() {
                        let yrow = y.row_slice(i);
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..cols {
                            drow[j] += t * yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::SliceCols(a, s, e) => {
                let cols = val(a).cols();
                let w = e - s;
                self.acc(grads, *a, |da| {
                    for (drow, grow) in da.chunks_mut(cols).zip(gd.chunks(w)) {
                        add_into(&mut drow[*s..*e], grow, 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    self.acc(grads, *p, |dp| {
                        for (drow, grow) in dp.chunks_mut(w).zip(gd.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let cols = val(a).cols();
                self.acc(grads, *a, |da| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut da[i * cols..(i + 1) * cols], &gd[k * cols..(k + 1) * cols], 1.0);
                    }
                });
            }
            Op::UpperTriangular(a, p) => {
                self.acc(grads, *a, |da| {
                    let mut k = 0;
                    for i in 0..*p {
                        for j in i + 1..*p {
                            da[k] += gd[i * p + j];
                            k += 1;
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (x, y) = (val(a), val(b));
                let ((n, d), (m, _)) = (x.dims(), y.dims());
                self.acc(grads, *a, |da| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * gd[i * m + j];
                            for c in 0..d {
                                da[i * d + c] += gij * (x.data()[i * d + c] - y.data()[j * d + c]);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * gd[i * m + j];
                            for c in 0..d {
                                db[j * d + c] -= gij * (x.data()[i * d + c] - y.data()[j * d + c]);
                            }
                        }
                    }
                });
            }
            Op::KernelMean(a, bws) => {
                let x = val(a).data();
                let scale = gd[0] / x.len() as f64;
                self.acc(grads, *a, |da| {
                    for (dv, &dist) in da.iter_mut().zip(x) {
                        let s: f64 = bws.iter().map(|&b| -(-dist / b).exp() / b).sum();
                        *dv += scale * s;
                    }
                });
            }
            Op::Propagate(a, prop) => {
                let cols = val(a).cols();
                self.acc(grads, *a, |da| prop.apply_transpose(gd, cols, da));
            }
            Op::Attention {
                wh,
                src,
                dst,
                nbrs,
                slope,
            } => {
                let (h, s, t) = (val(wh), val(src), val(dst));
                let (rows, cols) = h.dims();
                let n = nbrs.n_nodes();
                let mut dh = vec![0.0; rows * cols];
                let mut ds = vec![0.0; rows];
                let mut dt = vec![0.0; rows];
                let mut alpha = Vec::new();
                let mut dalpha = Vec::new();
                for block in 0..rows / n {
                    let base = block * n;
                    for v in 0..n {
                        attention_weights(nbrs, base, v, s.data(), t.data(), *slope, &mut alpha);
                        let gv = &gd[(base + v) * cols..(base + v + 1) * cols];
                        dalpha.clear();
                        for (&u, &w) in nbrs.neighbors(v).iter().zip(&alpha) {
                            let hu = h.row_slice(base + u);
                            dalpha.push(gv.iter().zip(hu).map(|(g, x)| g * x).sum::<f64>());
                            for c in 0..cols {
                                dh[(base + u) * cols + c] += w * gv[c];
                            }
                        }
                        let dot: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                        for (k, &u) in nbrs.neighbors(v).iter().enumerate() {
                            let de = alpha[k] * (dalpha[k] - dot);
                            let pre = t.data()[base + v] + s.data()[base + u];
                            let dpre = de * if pre > 0.0 { 1.0 } else { *slope };
                            dt[base + v] += dpre;
                            ds[base + u] += dpre;
                        }
                    }
                }
                self.acc(grads, *wh, |d| add_into(d, &dh, 1.0));
                self.acc(grads, *src, |d| add_into(d, &ds, 1.0));
                self.acc(grads, *dst, |d| add_into(d, &dt, 1.0));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(g.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Max-subtracted `softmax(t · x)` written into `out`.
pub(crate) fn softmax_into(x: &[f64], t: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(t * v));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (t * v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn attention_weights(
    nbrs: &NeighborSets,
    base: usize,
    v: usize,
    src: &[f64],
    dst: &[f64],
    slope: f64,
    alpha: &mut Vec<f64>,
) {
    alpha.clear();
    for &u in nbrs.neighbors(v) {
        let pre = dst[base + v] + src[base + u];
        alpha.push(if pre > 0.0 { pre } else { slope * pre });
    }
    let logits = alpha.clone();
    softmax_into(&logits, 1.0, alpha);
}
