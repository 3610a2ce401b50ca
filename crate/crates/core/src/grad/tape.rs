//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value. Nodes whose
//! inputs carry no gradient are recorded as constants, so forward passes on
//! a tape without trainable leaves cost only the arithmetic.

use std::collections::{BTreeMap, HashMap};

use super::params::{Gradients, ParameterSet};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Value used in place of `-inf` for masked logits.
pub const MASK_SENTINEL: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    SumCols(Var),
    Clip(Var, f64, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    MaskedFill(Var, Vec<bool>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    RowVecMat(Var, Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::Clip(..) => "clip",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::MaskedFill(..) => "masked_fill",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::RowVecMat(..) => "row_vec_mat",
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
            | Op::MulCol(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b)
            | Op::RowVecMat(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gather(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SumCols(a)
            | Op::Clip(a, _, _)
            | Op::MaskedFill(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: Option<&'static str>,
    label: Option<String>,
}

/// Parameters registered on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("bound", format!("parameter `{name}` not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Computation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    scope: Option<&'static str>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::contract(op, detail)
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
        self.scope = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Tags every node created until the next call, for graph inspection.
    pub fn set_scope(&mut self, scope: Option<&'static str>) {
        self.scope = scope;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool, label: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            scope: self.scope,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.leaf(value, true, Some(name.to_string()))
    }

    /// Registers every tensor of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name, t.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers `params` as constants (no gradient will reach them).
    pub fn bind_frozen(&mut self, params: &ParameterSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = self.leaf(t.clone(), false, Some(name.clone()));
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies a value into a fresh constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Labels of every trainable leaf recorded so far.
    pub fn trainable_leaf_labels(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .filter_map(|n| n.label.clone())
            .collect()
    }

    /// Marks every node `root` depends on (including itself).
    pub fn ancestors(&self, root: Var) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            stack.extend(self.nodes[v.0].op.inputs());
        }
        seen
    }

    /// Whether any node tagged `scope` feeds into `root` through a
    /// gradient-carrying path.
    pub fn scope_reaches(&self, root: Var, scope: &str) -> bool {
        self.ancestors(root)
            .iter()
            .zip(&self.nodes)
            .any(|(&seen, n)| seen && n.requires_grad && n.scope == Some(scope))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope,
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds a bias vector (length = last axis) to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(shape_err(
                "add_row",
                format!("bias of {} for {cols} columns", self.value(bias).len()),
            ));
        }
        let x = self.value(a);
        let b = self.value(bias).data();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::AddRow(a, bias))
    }

    /// Multiplies each row of `a` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let cols = self.value(a).cols();
        if self.value(col).len() != rows {
            return Err(shape_err(
                "mul_col",
                format!("column of {} for {rows} rows", self.value(col).len()),
            ));
        }
        let c = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for (row, s) in data.chunks_mut(cols).zip(c) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`. The gradient is 1 on the closed interval.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(shape_err("clip", format!("empty interval [{lo}, {hi}]")));
        }
        self.unary(a, |v| v.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(a))
    }

    /// Picks one entry per row: `out[r] = a[r, index[r]]`, shape `[rows, 1]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        if index.len() != rows {
            return Err(shape_err("gather", format!("{} indices for {rows} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(shape_err("gather", format!("index {bad} out of {cols} columns")));
        }
        let data = index.iter().enumerate().map(|(r, &i)| x.data()[r * cols + i]).collect();
        self.push(Tensor::from_parts(vec![rows, 1], data), Op::Gather(a, index.to_vec()))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row sums, shape `[rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let data: Vec<f64> = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        self.push(Tensor::from_parts(vec![rows, 1], data), Op::SumCols(a))
    }

    /// Sets entries where `mask` is false to `fill`; they receive no gradient.
    pub fn masked_fill(&mut self, a: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let x = self.value(a);
        if keep.len() != x.len() {
            return Err(shape_err(
                "masked_fill",
                format!("mask of {} for {} values", keep.len(), x.len()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::MaskedFill(a, keep.to_vec()))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(a), "slice_cols")?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let rows = matrix_dims(self.value(*first), "concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = matrix_dims(self.value(*p), "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let cols = matrix_dims(self.value(*first), "concat_rows")?.1;
        let mut rows = 0;
        for p in parts {
            let (r, c) = matrix_dims(self.value(*p), "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} columns vs {cols}")));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(a))
    }

    /// Per-row vector-matrix product: `q` is `[B, n]`, `w` is `[B, n*m]`
    /// holding one row-major `n x m` matrix per row; the result is `[B, m]`.
    pub fn row_vec_mat(&mut self, q: Var, w: Var, m: usize) -> Result<Var> {
        let (b, n) = matrix_dims(self.value(q), "row_vec_mat")?;
        let (b2, nm) = matrix_dims(self.value(w), "row_vec_mat")?;
        if b != b2 || nm != n * m {
            return Err(shape_err(
                "row_vec_mat",
                format!("q {b}x{n}, w {b2}x{nm}, m {m}"),
            ));
        }
        let (qd, wd) = (self.value(q).data(), self.value(w).data());
        let mut out = vec![0.0; b * m];
        for r in 0..b {
            for i in 0..n {
                let qi = qd[r * n + i];
                let wrow = &wd[r * nm + i * m..r * nm + (i + 1) * m];
                for (o, wv) in out[r * m..(r + 1) * m].iter_mut().zip(wrow) {
                    *o += qi * wv;
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, m], out), Op::RowVecMat(q, w, m))
    }

    /// Linear layer `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Accumulates gradients of the scalar `loss` into every reachable node.
    ///
    /// A tape can be differentiated once; call [`Tape::reset`] to reuse it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward", "tape already consumed; reset it first"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            } else {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a node after [`Tape::backward`], if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| {
            Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone())
        })
    }

    /// Gradients for every bound parameter; unreachable ones are zero.
    pub fn gradients(&self, bound: &Bound) -> Gradients {
        let map: BTreeMap<String, Tensor> = bound
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Gradients::from_map(map)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        // Allocates the input's gradient buffer on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                acc(*a, &mut |ga| gemm(m, n, k, g, false, val(*b), true, ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, val(*a), true, g, false, gb, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, d), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += d * yv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, d), xv) in gb.iter_mut().zip(g).zip(x) {
                        *o += d * xv;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let cols = out.cols();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let cols = out.cols();
                let (x, c) = (val(*a), val(*col));
                acc(*a, &mut |ga| {
                    for ((orow, grow), s) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(c) {
                        orow.iter_mut().zip(grow).for_each(|(o, d)| *o += d * s);
                    }
                });
                acc(*col, &mut |gc| {
                    for ((o, grow), xrow) in gc.iter_mut().zip(g.chunks(cols)).zip(x.chunks(cols)) {
                        *o += grow.iter().zip(xrow).map(|(d, xv)| d * xv).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * s)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += d * y;
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += d / xv;
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += d * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, d), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += d * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += d;
                        }
                    }
                })
            }
            Op::Elu(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += if *xv > 0.0 { *d } else { d * xv.exp() };
                    }
                })
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += d * if *xv > 0.0 { 1.0 } else if *xv < 0.0 { -1.0 } else { 0.0 };
                    }
                })
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * d * xv;
                    }
                })
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                acc(*a, &mut |ga| {
                    for ((orow, grow), yrow) in
                        ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((o, d), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (d - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                acc(*a, &mut |ga| {
                    for ((orow, grow), lrow) in
                        ga.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((o, d), l) in orow.iter_mut().zip(grow).zip(lrow) {
                            *o += d - l.exp() * total;
                        }
                    }
                })
            }
            Op::Gather(a, index) => {
                let cols = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, (&ix, d)) in index.iter().zip(g).enumerate() {
                        ga[r * cols + ix] += d;
                    }
                })
            }
            Op::Mean(a) => {
                let scale = g[0] / nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += scale))
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::SumCols(a) => {
                let cols = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (orow, d) in ga.chunks_mut(cols).zip(g) {
                        orow.iter_mut().for_each(|o| *o += d);
                    }
                })
            }
            Op::Clip(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, d), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv >= *lo && *xv <= *hi {
                            *o += d;
                        }
                    }
                })
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(nodes[i].op, Op::Maximum(..));
                let (x, y) = (val(*a), val(*b));
                // Ties route the gradient to the first operand.
                let pick_a = |xv: f64, yv: f64| if is_max { xv >= yv } else { xv <= yv };
                acc(*a, &mut |ga| {
                    for (((o, d), xv), yv) in ga.iter_mut().zip(g).zip(x).zip(y) {
                        if pick_a(*xv, *yv) {
                            *o += d;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (((o, d), xv), yv) in gb.iter_mut().zip(g).zip(x).zip(y) {
                        if !pick_a(*xv, *yv) {
                            *o += d;
                        }
                    }
                });
            }
            Op::MaskedFill(a, keep) => acc(*a, &mut |ga| {
                for ((o, d), k) in ga.iter_mut().zip(g).zip(keep) {
                    if *k {
                        *o += d;
                    }
                }
            }),
            Op::SliceCols(a, start) => {
                let cols = nodes[a.0].value.cols();
                let len = out.cols();
                acc(*a, &mut |ga| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut ga[r * cols + start..r * cols + start + len], grow);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(*p, &mut |gp| {
                        for (r, orow) in gp.chunks_mut(c).enumerate() {
                            add_into(orow, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::RowVecMat(q, w, m) => {
                let m = *m;
                let (qd, wd) = (val(*q), val(*w));
                let n = nodes[q.0].value.cols();
                let nm = n * m;
                acc(*q, &mut |gq| {
                    for (r, grow) in g.chunks(m).enumerate() {
                        for i in 0..n {
                            let wrow = &wd[r * nm + i * m..r * nm + (i + 1) * m];
                            gq[r * n + i] += grow.iter().zip(wrow).map(|(d, wv)| d * wv).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (r, grow) in g.chunks(m).enumerate() {
                        for i in 0..n {
                            let qi = qd[r * n + i];
                            let orow = &mut gw[r * nm + i * m..r * nm + (i + 1) * m];
                            orow.iter_mut().zip(grow).for_each(|(o, d)| *o += qi * d);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
