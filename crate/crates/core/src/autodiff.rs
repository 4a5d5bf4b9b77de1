//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is built eagerly: every op computes its value immediately and
//! appends a node, so node ids are already in topological order. Calling
//! [`Graph::backward`] walks the tape once in reverse. Nodes that do not
//! depend on a trainable leaf are skipped entirely.
//!
//! ```
//! use setcomplete::autodiff::Graph;
//! use setcomplete::params::ParamStore;
//! use setcomplete::tensor::Tensor;
//!
//! let mut store = ParamStore::new();
//! store.insert("w", Tensor::row_vector(&[1.0, 2.0, 3.0])).unwrap();
//! let mut g = Graph::new();
//! let w = g.param(&store, "w").unwrap();
//! let loss = g.sum(w).unwrap();
//! let (value, grads) = g.eval_and_grad(&store, loss).unwrap();
//! assert_eq!(value, 6.0);
//! assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{dot, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
    MeanRows { x: NodeId, weights: Vec<f64> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    Pick { x: NodeId, idx: Vec<usize> },
    SqDist(NodeId, NodeId),
    MinRows { x: NodeId, arg: Vec<usize> },
    MinCols { x: NodeId, arg: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded computation. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
}

/// Gradients with respect to every node of a graph after [`Graph::backward`].
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn checked(&mut self, name: &'static str, op: Op, value: Tensor, rg: bool) -> Result<NodeId> {
        ensure_finite(name, &value)?;
        Ok(self.push(op, value, rg))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A leaf whose gradient is tracked (read it back via [`NodeGrads`]).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Binds a parameter of `store`. Each name is bound once per graph; a
    /// frozen store yields constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = if store.is_frozen() {
            self.constant(value)
        } else {
            self.push(Op::Param, value, true)
        };
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let v = va.matmul(vb);
        let rg = self.rg(&[a, b]);
        self.checked("matmul", Op::MatMul(a, b), v, rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", va.shape(), vb.shape()),
            ));
        }
        let v = va.matmul_t(vb);
        let rg = self.rg(&[a, b]);
        self.checked("matmul_t", Op::MatMulT(a, b), v, rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.checked("add", Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.checked("sub", Op::Sub(a, b), v, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.checked("mul", Op::Mul(a, b), v, rg)
    }

    fn row_operand(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<()> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(Error::shape(op, format!("{sa:?} with row {sr:?}")));
        }
        Ok(())
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_operand("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.checked("add_row", Op::AddRow(a, row), v, rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_operand("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.checked("mul_row", Op::MulRow(a, row), v, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.checked("scale", Op::Scale(a, s), v, rg)
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.checked("relu", Op::Relu(a), v, rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.checked("softplus", Op::Softplus(a), v, rg)
    }

    /// Row-wise softmax. Columns with `col_mask[j] == false` get exactly zero
    /// weight; every row must keep at least one column.
    pub fn softmax_rows(&mut self, a: NodeId, col_mask: Option<&[bool]>) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(m) = col_mask {
            if m.len() != x.cols() {
                return Err(Error::shape("softmax_rows", "mask length"));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::EmptySet("every softmax column is masked"));
            }
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let keep = |j: usize| col_mask.is_none_or(|m| m[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { (*x - max).exp() } else { 0.0 };
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.rg(&[a]);
        self.checked("softmax_rows", Op::Softmax(a), v, rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.checked("log_softmax_rows", Op::LogSoftmax(a), v, rg)
    }

    /// Normalises each row to zero mean and unit variance over its columns
    /// (no affine part; see [`crate::layers::LayerNorm`]).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        let d = v.cols() as f64;
        let mut inv_std = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.checked("layer_norm_rows", Op::LayerNorm { x: a, inv_std }, v, rg)
    }

    /// Each row divided by its Euclidean norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = dot(row, row).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.checked("normalize_rows", Op::NormalizeRows { x: a, norms }, v, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.checked("sum", Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::EmptySet("mean of empty tensor"));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.checked("mean", Op::Mean(a), v, rg)
    }

    /// Column means over the rows kept by `row_mask` (`1 x c`).
    pub fn mean_rows(&mut self, a: NodeId, row_mask: Option<&[bool]>) -> Result<NodeId> {
        let x = self.value(a);
        let weights: Vec<f64> = match row_mask {
            Some(m) => {
                if m.len() != x.rows() {
                    return Err(Error::shape("mean_rows", "mask length"));
                }
                let n = m.iter().filter(|&&b| b).count();
                if n == 0 {
                    return Err(Error::EmptySet("mean_rows with every row masked"));
                }
                m.iter()
                    .map(|&b| if b { 1.0 / n as f64 } else { 0.0 })
                    .collect()
            }
            None => {
                if x.rows() == 0 {
                    return Err(Error::EmptySet("mean_rows of zero rows"));
                }
                vec![1.0 / x.rows() as f64; x.rows()]
            }
        };
        let mut out = vec![0.0; x.cols()];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += w * v;
            }
        }
        let v = Tensor::row_vector(&out);
        let rg = self.rg(&[a]);
        self.checked("mean_rows", Op::MeanRows { x: a, weights }, v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(Error::EmptySet("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        self.checked("concat_cols", Op::ConcatCols(parts.to_vec()), v, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or(Error::EmptySet("concat_rows of nothing"))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        self.checked("concat_rows", Op::ConcatRows(parts.to_vec()), v, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} > {}", x.cols()),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::from_vec(x.rows(), len, data)?;
        let rg = self.rg(&[a]);
        self.checked("slice_cols", Op::SliceCols { x: a, start }, v, rg)
    }

    /// Rows of `a` in the order given by `idx` (rows may repeat).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", x.rows()),
            ));
        }
        let v = x.select_rows(idx);
        let rg = self.rg(&[a]);
        self.checked(
            "gather_rows",
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            v,
            rg,
        )
    }

    /// Column vector with `a[i, idx[i]]` in row `i`.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&j| j >= x.cols()) {
            return Err(Error::shape("pick", "index out of range"));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| x.get(i, j)).collect();
        let v = Tensor::from_vec(idx.len(), 1, data)?;
        let rg = self.rg(&[a]);
        self.checked(
            "pick",
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            v,
            rg,
        )
    }

    /// Pairwise squared Euclidean distances, `n x m` for `n x d` and `m x d`.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape("sq_dist", "feature dimensions differ"));
        }
        let mut data = Vec::with_capacity(va.rows() * vb.rows());
        for i in 0..va.rows() {
            let x = va.row(i);
            for j in 0..vb.rows() {
                data.push(
                    x.iter()
                        .zip(vb.row(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum(),
                );
            }
        }
        let v = Tensor::from_vec(va.rows(), vb.rows(), data)?;
        let rg = self.rg(&[a, b]);
        self.checked("sq_dist", Op::SqDist(a, b), v, rg)
    }

    /// Row minima as an `n x 1` column; ties resolve to the first column.
    pub fn min_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::EmptySet("min over zero columns"));
        }
        let mut arg = Vec::with_capacity(x.rows());
        let mut vals = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let (j, v) = argmin(x.row(i).iter().copied());
            arg.push(j);
            vals.push(v);
        }
        let v = Tensor::from_vec(x.rows(), 1, vals)?;
        let rg = self.rg(&[a]);
        self.checked("min_rows", Op::MinRows { x: a, arg }, v, rg)
    }

    /// Column minima as a `1 x m` row; ties resolve to the first row.
    pub fn min_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::EmptySet("min over zero rows"));
        }
        let mut arg = Vec::with_capacity(x.cols());
        let mut vals = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let (i, v) = argmin((0..x.rows()).map(|i| x.get(i, j)));
            arg.push(i);
            vals.push(v);
        }
        let v = Tensor::row_vector(&vals);
        let rg = self.rg(&[a]);
        self.checked("min_cols", Op::MinCols { x: a, arg }, v, rg)
    }

    /// Propagates `d loss / d node` back through the tape.
    pub fn backward(&self, loss: NodeId) -> Result<NodeGrads> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        self.backward_from(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backward pass seeded with explicit upstream gradients.
    pub fn backward_from(&self, seeds: &[(NodeId, Tensor)]) -> Result<NodeGrads> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (id, seed) in seeds {
            if seed.shape() != self.value(*id).shape() {
                return Err(Error::shape("backward", "seed shape"));
            }
            accumulate(&mut grads[id.0], seed.clone());
            last = last.max(id.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            ensure_finite("backward", &gout)?;
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(NodeGrads { grads })
    }

    /// Loss value and the gradient for every parameter of `store`;
    /// parameters the loss does not reach get zeros.
    pub fn eval_and_grad(&self, store: &ParamStore, loss: NodeId) -> Result<(f64, Gradients)> {
        let node_grads = self.backward(loss)?;
        let mut out = Gradients::new();
        if store.is_frozen() {
            return Ok((self.value(loss).item(), out));
        }
        for (name, p) in store.iter() {
            let g = self
                .param_nodes
                .get(name)
                .and_then(|id| node_grads.get(*id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()));
            out.insert(name.to_string(), g);
        }
        Ok((self.value(loss).item(), out))
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gout.matmul_t(self.value(*b)));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t_matmul(gout));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gout.matmul(self.value(*b)));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gout.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gout.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gout.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gout.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, r) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], gout.clone());
                }
                if wants(*r) {
                    accumulate(&mut grads[r.0], column_sums(gout));
                }
            }
            Op::MulRow(a, r) => {
                let row = self.value(*r);
                if wants(*a) {
                    let mut ga = gout.clone();
                    for k in 0..ga.rows() {
                        for (g, s) in ga.row_mut(k).iter_mut().zip(row.data()) {
                            *g *= s;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if wants(*r) {
                    let prod = gout.zip_map(self.value(*a), |g, x| g * x);
                    accumulate(&mut grads[r.0], column_sums(&prod));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(&mut grads[a.0], gout.map(|g| g * s));
            }
            Op::Relu(a) => {
                let ga = gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(&mut grads[a.0], ga);
            }
            Op::Softplus(a) => {
                let ga = gout.zip_map(self.value(*a), |g, x| g * sigmoid(x));
                accumulate(&mut grads[a.0], ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = gout.clone();
                for k in 0..y.rows() {
                    let s = dot(y.row(k), gout.row(k));
                    for (g, &p) in ga.row_mut(k).iter_mut().zip(y.row(k)) {
                        *g = p * (*g - s);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = gout.clone();
                for k in 0..y.rows() {
                    let s: f64 = gout.row(k).iter().sum();
                    for (g, &ly) in ga.row_mut(k).iter_mut().zip(y.row(k)) {
                        *g -= ly.exp() * s;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = &node.value;
                let d = xhat.cols() as f64;
                let mut gx = gout.clone();
                for k in 0..xhat.rows() {
                    let g = gout.row(k);
                    let h = xhat.row(k);
                    let mean_g = g.iter().sum::<f64>() / d;
                    let mean_gh = dot(g, h) / d;
                    for ((o, &gi), &hi) in gx.row_mut(k).iter_mut().zip(g).zip(h) {
                        *o = inv_std[k] * (gi - mean_g - hi * mean_gh);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = gout.clone();
                for k in 0..y.rows() {
                    let yd = dot(y.row(k), gout.row(k));
                    for (o, &yi) in gx.row_mut(k).iter_mut().zip(y.row(k)) {
                        *o = (*o - yi * yd) / norms[k];
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(
                    &mut grads[a.0],
                    Tensor::filled(x.rows(), x.cols(), gout.item()),
                );
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let g = gout.item() / x.len() as f64;
                accumulate(&mut grads[a.0], Tensor::filled(x.rows(), x.cols(), g));
            }
            Op::MeanRows { x, weights } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, g) in gx.row_mut(k).iter_mut().zip(gout.data()) {
                        *o = w * g;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if wants(*p) {
                        let mut gp = Tensor::zeros(gout.rows(), c);
                        for k in 0..gout.rows() {
                            gp.row_mut(k)
                                .copy_from_slice(&gout.row(k)[offset..offset + c]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = gout.cols();
                let mut offset = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if wants(*p) {
                        let data = gout.data()[offset * cols..(offset + r) * cols].to_vec();
                        accumulate(
                            &mut grads[p.0],
                            Tensor::from_vec(r, cols, data).expect("concat_rows slice"),
                        );
                    }
                    offset += r;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let len = gout.cols();
                for k in 0..gout.rows() {
                    gx.row_mut(k)[*start..*start + len].copy_from_slice(gout.row(k));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, g) in gx.row_mut(r).iter_mut().zip(gout.row(k)) {
                        *o += g;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &j) in idx.iter().enumerate() {
                    gx.set(k, j, gout.get(k, 0));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                if wants(*a) {
                    let mut ga = Tensor::zeros(va.rows(), d);
                    for k in 0..va.rows() {
                        let x = va.row(k);
                        let out = ga.row_mut(k);
                        for j in 0..vb.rows() {
                            let w = 2.0 * gout.get(k, j);
                            for ((o, p), q) in out.iter_mut().zip(x).zip(vb.row(j)) {
                                *o += w * (p - q);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(vb.rows(), d);
                    for j in 0..vb.rows() {
                        let y = vb.row(j);
                        let out = gb.row_mut(j);
                        for k in 0..va.rows() {
                            let w = 2.0 * gout.get(k, j);
                            for ((o, q), p) in out.iter_mut().zip(y).zip(va.row(k)) {
                                *o += w * (q - p);
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MinRows { x, arg } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (k, &j) in arg.iter().enumerate() {
                    gx.set(k, j, gout.get(k, 0));
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::MinCols { x, arg } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (j, &k) in arg.iter().enumerate() {
                    gx.set(k, j, gout.get(0, j));
                }
                accumulate(&mut grads[x.0], gx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for row in t.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row_vector(&out)
}

fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 || i == 0 {
            best = (i, v);
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over entries of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences for every entry of
/// every parameter in `store`. `build` must rebuild the same loss from
/// scratch on each call.
pub fn finite_diff_check<F>(store: &ParamStore, step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let (_, analytic) = g.eval_and_grad(store, loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name)?.len();
        let ga = analytic.get(&name).expect("gradient for every parameter");
        for k in 0..n {
            let orig = store.get(&name)?.data()[k];
            let (up, down) = (orig + step, orig - step);
            if up == orig || down == orig {
                return Err(Error::StepTooSmall {
                    step,
                    param: name.clone(),
                });
            }
            work.get_mut(&name)?.data_mut()[k] = up;
            let fp = eval(&work)?;
            work.get_mut(&name)?.data_mut()[k] = down;
            let fm = eval(&work)?;
            work.get_mut(&name)?.data_mut()[k] = orig;

            let a = ga.data()[k];
            if fp == fm && a.abs() * step > 8.0 * f64::EPSILON * fp.abs().max(1.0) {
                return Err(Error::StepTooSmall {
                    step,
                    param: name.clone(),
                });
            }
            let numeric = (fp - fm) / (2.0 * step);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn sum_gradient_is_ones() {
        let s = store_with("w", Tensor::row_vector(&[1.0, 2.0, 3.0]));
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let l = g.sum(w).unwrap();
        let (v, grads) = g.eval_and_grad(&s, l).unwrap();
        assert_eq!(v, 6.0);
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let s = store_with("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let l = g.matmul_t(w, w).unwrap();
        let (v, grads) = g.eval_and_grad(&s, l).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads.get("w").unwrap().item(), 6.0);
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut s = store_with("w", Tensor::scalar(3.0));
        s.insert("unused", Tensor::zeros(2, 2)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let l = g.sum(w).unwrap();
        let (_, grads) = g.eval_and_grad(&s, l).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = store_with("w", Tensor::row_vector(&[1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        assert!(matches!(
            g.eval_and_grad(&s, w),
            Err(Error::NonScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn nan_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(&[0.0, 1.0]));
        // 0/0 in the normaliser
        let z = g.scale(a, 0.0).unwrap();
        assert!(matches!(g.normalize_rows(z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = store_with("logits", Tensor::randn(1, 4, 0.0, 1.0, &mut rng));
        let build = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, "logits")?;
            let ls = g.log_softmax_rows(x)?;
            let p = g.pick(ls, &[2])?;
            let l = g.sum(p)?;
            g.scale(l, -1.0)
        };
        let check = finite_diff_check(&s, 1e-5, build).unwrap();
        assert_eq!(check.entries_checked, 4);
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn linear_loss_is_exact_under_finite_differences() {
        let s = store_with("w", Tensor::row_vector(&[0.5, -1.5, 2.0]));
        for step in [1e-3, 1e-4] {
            let check = finite_diff_check(&s, step, |g, s| {
                let w = g.param(s, "w")?;
                let w3 = g.scale(w, 3.0)?;
                g.sum(w3)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-9, "{check:?}");
        }
    }

    #[test]
    fn relu_away_from_kink() {
        let s = store_with("w", Tensor::row_vector(&[0.7, -0.4, 1.3, -2.0]));
        let check = finite_diff_check(&s, 1e-5, |g, s| {
            let w = g.param(s, "w")?;
            let r = g.relu(w)?;
            let sq = g.mul(r, r)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn tiny_step_is_rejected() {
        let s = store_with("w", Tensor::scalar(1.0));
        let r = finite_diff_check(&s, 1e-20, |g, s| {
            let w = g.param(s, "w")?;
            g.sum(w)
        });
        assert!(matches!(r, Err(Error::StepTooSmall { .. })));
        assert!(finite_diff_check(&s, 0.0, |g, s| g.param(s, "w")).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(6, 5, 0.0, 4.0, &mut rng));
        let y = g.softmax_rows(x, None).unwrap();
        for r in g.value(y).iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mask = [true, false, true, true, false];
        let ym = g.softmax_rows(x, Some(&mask)).unwrap();
        for r in g.value(ym).iter_rows() {
            assert_eq!(r[1], 0.0);
            assert_eq!(r[4], 0.0);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax_rows(x, Some(&[false; 5])).is_err());
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = store_with("w", Tensor::randn(3, 3, 0.0, 1.0, &mut rng));
        let run = || {
            let mut g = Graph::new();
            let w = g.param(&s, "w").unwrap();
            let h = g.layer_norm_rows(w).unwrap();
            let a = g.softmax_rows(h, None).unwrap();
            let l = g.sum(a).unwrap();
            let m = g.matmul(a, w).unwrap();
            let l2 = g.mean(m).unwrap();
            let t = g.add(l, l2).unwrap();
            g.eval_and_grad(&s, t).unwrap()
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }
}
