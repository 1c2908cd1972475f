//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are methods on the tape that take and return [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar propagates adjoints from that node back to
//! the leaves and accumulates them into the gradient buffers of trainable
//! leaves. A fresh tape is built for every optimization step; parameters
//! live outside the tape in a [`ParamStore`](crate::params::ParamStore).
//!
//! Binary elementwise operations broadcast like numpy on both axes: each
//! dimension must either agree or be `1` on one side.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis. `Rows` collapses the row dimension (result `[1, c]`),
/// `Cols` collapses the column dimension (result `[r, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Elu(Var),
    Gaussian(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    MaxAxis { x: Var, axis: Axis, arg: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Softmax(Var),
    LogSumExp(Var),
    SortCols { x: Var, perm: Vec<usize> },
    PairwiseSqDist(Var),
    Center(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            return Err(Error::Shape { op, lhs: a, rhs: b });
        };
    }
    Ok(out)
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let [r, c] = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(r, c, data);
    }
    let (ar, ac) = (a.rows() == 1, a.cols() == 1);
    let (br, bc) = (b.rows() == 1, b.cols() == 1);
    Ok(Tensor::from_fn(r, c, |i, j| {
        let x = a.get(if ar { 0 } else { i }, if ac { 0 } else { j });
        let y = b.get(if br { 0 } else { i }, if bc { 0 } else { j });
        f(x, y)
    }))
}

/// Sum `g` down to `shape` over the broadcast dimensions.
fn reduce_to(g: Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let (rr, cc) = (shape[0] == 1, shape[1] == 1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (if rr { 0 } else { i }, if cc { 0 } else { j });
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_softmax(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for (j, &v) in row.iter().enumerate() {
            out.set(i, j, (v - m).exp() / denom);
        }
    }
    out
}

/// Double centering `H K H` with `H = I - 11^T / n`.
fn center(k: &Tensor) -> Tensor {
    let n = k.rows();
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / nf).collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| k.get(i, j)).sum::<f64>() / nf)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    Tensor::from_fn(n, n, |i, j| k.get(i, j) - row_mean[i] - col_mean[j] + grand)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked and accumulated by [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = zip_broadcast(name, self.value(a), self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient; a zero anywhere in the denominator is rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = gemm(self.value(a), false, self.value(b), false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; nonpositive inputs are rejected.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("nonpositive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    /// `exp(-u^2 / 2)`.
    pub fn gaussian(&mut self, x: Var) -> Var {
        self.unary(x, |u| (-0.5 * u * u).exp(), Op::Gaussian(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Square root; the gradient at exactly zero is taken to be zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Var {
        let t = self.value(x);
        let value = match axis {
            Axis::Rows => Tensor::from_fn(1, t.cols(), |_, j| (0..t.rows()).map(|i| t.get(i, j)).sum()),
            Axis::Cols => Tensor::from_fn(t.rows(), 1, |i, _| t.row(i).iter().sum()),
        };
        let rg = self.rg(x);
        self.push(value, Op::SumAxis(x, axis), rg)
    }

    /// Maximum along an axis. Ties resolve to the lowest index; the gradient
    /// flows only to the selected entry.
    pub fn max_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("max_axis of an empty tensor"));
        }
        let (value, arg) = match axis {
            Axis::Rows => {
                let mut arg = Vec::with_capacity(t.cols());
                for j in 0..t.cols() {
                    let mut best = 0;
                    for i in 1..t.rows() {
                        if t.get(i, j) > t.get(best, j) {
                            best = i;
                        }
                    }
                    arg.push(best);
                }
                let v = Tensor::from_fn(1, t.cols(), |_, j| t.get(arg[j], j));
                (v, arg)
            }
            Axis::Cols => {
                let mut arg = Vec::with_capacity(t.rows());
                for i in 0..t.rows() {
                    let mut best = 0;
                    for j in 1..t.cols() {
                        if t.get(i, j) > t.get(i, best) {
                            best = j;
                        }
                    }
                    arg.push(best);
                }
                let v = Tensor::from_fn(t.rows(), 1, |i, _| t.get(i, arg[i]));
                (v, arg)
            }
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxAxis { x, axis, arg }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: [rows, cols],
                    rhs: s,
                });
            }
            cols += s[1];
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    value.set(i, off + j, t.get(i, j));
                }
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::vstack(&tensors).map_err(|e| match e {
            Error::Shape { lhs, rhs, .. } => Error::Shape {
                op: "concat_rows",
                lhs,
                rhs,
            },
            other => other,
        })?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s,
                rhs: [s[0], start + len],
            });
        }
        let t = self.value(x);
        let value = Tensor::from_fn(s[0], len, |i, j| t.get(i, start + j));
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: s,
                rhs: [start + len, s[1]],
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let value = self.value(x).select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = row_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Row-wise `log(sum(exp(x)))`, result `[r, 1]`.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.rows(), 1, |i, _| {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
        });
        let rg = self.rg(x);
        self.push(value, Op::LogSumExp(x), rg)
    }

    /// Sorts every column ascending. The gradient is routed back through the
    /// sorting permutation.
    pub fn sort_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut perm = vec![0usize; r * c];
        let mut value = Tensor::zeros(r, c);
        for j in 0..c {
            let mut idx: Vec<usize> = (0..r).collect();
            idx.sort_by(|&a, &b| t.get(a, j).total_cmp(&t.get(b, j)).then(a.cmp(&b)));
            for (i, &src) in idx.iter().enumerate() {
                perm[i * c + j] = src;
                value.set(i, j, t.get(src, j));
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::SortCols { x, perm }, rg)
    }

    /// Squared Euclidean distances between all pairs of rows: `[n, p] -> [n, n]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.rows();
        let mut value = Tensor::zeros(n, n);
        for i in 0..n {
            let ri = t.row(i);
            for j in (i + 1)..n {
                let d: f64 = ri.iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                value.set(i, j, d);
                value.set(j, i, d);
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::PairwiseSqDist(x), rg)
    }

    /// Double centering of a square matrix, `H K H`.
    pub fn center(&mut self, k: Var) -> Result<Var> {
        let s = self.shape(k);
        if s[0] != s[1] {
            return Err(Error::Shape {
                op: "center",
                lhs: s,
                rhs: [s[0], s[0]],
            });
        }
        let value = center(self.value(k));
        let rg = self.rg(k);
        Ok(self.push(value, Op::Center(k), rg))
    }

    /// Takes the value of `sample` but passes gradients straight through to
    /// `probs` (straight-through estimator).
    pub fn straight_through(&mut self, probs: Var, sample: Tensor) -> Result<Var> {
        let s = self.shape(probs);
        if sample.shape() != s {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: s,
                rhs: sample.shape(),
            });
        }
        let rg = self.rg(probs);
        Ok(self.push(sample, Op::StraightThrough(probs), rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into the
    /// buffers of trainable leaves across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(Error::NonScalarLoss(s));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, g);
            for (v, gv) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot @ None => *slot = Some(gv),
                }
            }
        }

        for n in &mut self.nodes {
            if n.trainable && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.rows(), n.value.cols()));
            }
        }
        Ok(())
    }

    /// Chain-rule contributions of node `i` to its inputs given upstream `g`.
    /// Leaves accumulate `g` into their gradient buffer.
    fn local_grads(&mut self, i: usize, g: Tensor) -> Vec<(Var, Tensor)> {
        if matches!(self.nodes[i].op, Op::Leaf) {
            let node = &mut self.nodes[i];
            if node.trainable {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            return vec![];
        }
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                vec![(*a, reduce_to(g.clone(), sa)), (*b, reduce_to(g, sb))]
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                vec![(*a, reduce_to(g.clone(), sa)), (*b, reduce_to(g.map(|v| -v), sb))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = zip_broadcast("mul", &g, tb, |x, y| x * y).expect("shapes checked");
                let gb = zip_broadcast("mul", &g, ta, |x, y| x * y).expect("shapes checked");
                vec![(*a, reduce_to(ga, ta.shape())), (*b, reduce_to(gb, tb.shape()))]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = zip_broadcast("div", &g, tb, |x, y| x / y).expect("shapes checked");
                // d(a/b)/db = -(a/b)/b = -out/b
                let q = zip_broadcast("div", out, tb, |o, y| -o / y).expect("shapes checked");
                let gb = zip_broadcast("div", &g, &q, |x, y| x * y).expect("shapes checked");
                vec![(*a, reduce_to(ga, ta.shape())), (*b, reduce_to(gb, tb.shape()))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gemm(&g, false, tb, true);
                let gb = gemm(ta, true, &g, false);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Scale(x, c) => {
                let c = *c;
                vec![(*x, g.map(|v| v * c))]
            }
            Op::AddScalar(x) => vec![(*x, g)],
            Op::Exp(x) => vec![(*x, mul_same(&g, out))],
            Op::Log(x) => {
                let t = val(*x);
                vec![(*x, zip_same(&g, t, |gv, xv| gv / xv))]
            }
            Op::Tanh(x) => vec![(*x, zip_same(&g, out, |gv, o| gv * (1.0 - o * o)))],
            Op::Relu(x) => {
                let t = val(*x);
                vec![(*x, zip_same(&g, t, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
            }
            Op::Softplus(x) => {
                let t = val(*x);
                vec![(*x, zip_same(&g, t, |gv, xv| gv * sigmoid(xv)))]
            }
            Op::Sigmoid(x) => vec![(*x, zip_same(&g, out, |gv, o| gv * o * (1.0 - o)))],
            Op::Elu(x) => {
                let t = val(*x);
                vec![(*x, zip_same(&g, t, |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() }))]
            }
            Op::Gaussian(x) => {
                let t = val(*x);
                vec![(*x, zip3(&g, t, out, |gv, u, o| -gv * u * o))]
            }
            Op::Abs(x) => {
                let t = val(*x);
                vec![(*x, zip_same(&g, t, |gv, xv| gv * sign(xv)))]
            }
            Op::Square(x) => {
                let t = val(*x);
                vec![(*x, zip_same(&g, t, |gv, xv| 2.0 * gv * xv))]
            }
            Op::Sqrt(x) => vec![(
                *x,
                zip_same(&g, out, |gv, o| if o > 0.0 { 0.5 * gv / o } else { 0.0 }),
            )],
            Op::Sum(x) => {
                let s = val(*x).shape();
                vec![(*x, Tensor::filled(s[0], s[1], g.item()))]
            }
            Op::Mean(x) => {
                let s = val(*x).shape();
                let n = (s[0] * s[1]) as f64;
                vec![(*x, Tensor::filled(s[0], s[1], g.item() / n))]
            }
            Op::SumAxis(x, axis) => {
                let s = val(*x).shape();
                let gx = match axis {
                    Axis::Rows => Tensor::from_fn(s[0], s[1], |_, j| g.get(0, j)),
                    Axis::Cols => Tensor::from_fn(s[0], s[1], |i, _| g.get(i, 0)),
                };
                vec![(*x, gx)]
            }
            Op::MaxAxis { x, axis, arg } => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s[0], s[1]);
                match axis {
                    Axis::Rows => {
                        for (j, &i) in arg.iter().enumerate() {
                            gx.set(i, j, g.get(0, j));
                        }
                    }
                    Axis::Cols => {
                        for (i, &j) in arg.iter().enumerate() {
                            gx.set(i, j, g.get(i, 0));
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).cols();
                    let gp = Tensor::from_fn(g.rows(), c, |r, j| g.get(r, off + j));
                    off += c;
                    res.push((p, gp));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let r = val(p).rows();
                    let idx: Vec<usize> = (off..off + r).collect();
                    off += r;
                    res.push((p, g.select_rows(&idx)));
                }
                res
            }
            Op::SliceCols { x, start } => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s[0], s[1]);
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        gx.set(r, start + j, g.get(r, j));
                    }
                }
                vec![(*x, gx)]
            }
            Op::SliceRows { x, start } => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s[0], s[1]);
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        gx.set(start + r, j, g.get(r, j));
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
                    for j in 0..out.cols() {
                        gx.set(r, j, out.get(r, j) * (g.get(r, j) - dot));
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSumExp(x) => {
                let sm = row_softmax(val(*x));
                let gx = Tensor::from_fn(sm.rows(), sm.cols(), |r, j| g.get(r, 0) * sm.get(r, j));
                vec![(*x, gx)]
            }
            Op::SortCols { x, perm } => {
                let (r, c) = (out.rows(), out.cols());
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let src = perm[i * c + j];
                        gx.set(src, j, gx.get(src, j) + g.get(i, j));
                    }
                }
                vec![(*x, gx)]
            }
            Op::PairwiseSqDist(x) => {
                let t = val(*x);
                let n = t.rows();
                // S = G + G^T; dX = 2 (diag(rowsum S) X - S X)
                let s = Tensor::from_fn(n, n, |a, b| g.get(a, b) + g.get(b, a));
                let sx = gemm(&s, false, t, false);
                let gx = Tensor::from_fn(n, t.cols(), |a, k| {
                    let rs: f64 = s.row(a).iter().sum();
                    2.0 * (rs * t.get(a, k) - sx.get(a, k))
                });
                vec![(*x, gx)]
            }
            Op::Center(k) => vec![(*k, center(&g))],
            Op::StraightThrough(p) => vec![(*p, g)],
        }
    }
}

fn sign(x: f64) -> f64 {
    match x.partial_cmp(&0.0) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Less) => -1.0,
        _ => 0.0,
    }
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn mul_same(a: &Tensor, b: &Tensor) -> Tensor {
    zip_same(a, b, |x, y| x * y)
}

fn zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}
