//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in construction order, which is a
//! valid topological order, so backward is a single reverse sweep. Nodes
//! derived only from constants carry no gradient and are skipped.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, transpose, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type UnaryFn<T> = fn(T) -> T;

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Map(Var, UnaryFn<T>),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var, usize),
    Reshape(Var),
    SliceCols(Var, usize),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    LogSoftmaxPick { logits: Var, index: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
    L1(Var, Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Map(..) => "map",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::LogSoftmaxPick { .. } => "log_softmax_prob",
            Op::Mse(..) => "mse",
            Op::L1(..) => "l1",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    visits: Vec<u32>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| g.value(v).zeros_like())
    }

    /// Number of times each node's backward rule ran.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Batch extent used to normalize pixel losses: the first extent of a
/// matrix, 1 for a vector.
fn batch_of<T: Real>(t: &Tensor<T>) -> usize {
    if t.rank() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

fn log_softmax_row<T: Real>(x: &[T], p: &mut [T]) -> T {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (pi, &xi) in p.iter_mut().zip(x) {
        *pi = (xi - mx).exp();
        s = s + *pi;
    }
    for pi in p.iter_mut() {
        *pi = *pi / s;
    }
    mx + s.ln()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Parents of a node, in operand order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MatMul(a, b)
            | Op::Concat(a, b, _)
            | Op::Mse(a, b)
            | Op::L1(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::AddScalar(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Map(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::SliceCols(a, _) => vec![*a],
            Op::SoftmaxCe { logits, .. } | Op::LogSoftmaxPick { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s value; gradient does not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let out = zip_map(va, vb, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub")?;
        let out = zip_map(va, vb, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let out = zip_map(va, vb, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(Op::ScalarMul(a, k), out, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar(a), out, &[a])
    }

    /// Adds `bias [n]` to every row of `a [m x n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.rank() != 2 || vb.rank() != 1 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "add_bias: {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = vb.len();
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x = *x + b;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(Op::AddBias(a, bias), out, &[a, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut data, m, k, n);
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(Op::LeakyRelu(a, slope), out, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(Op::Sigmoid(a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.push(Op::Tanh(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.push(Op::Exp(a), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if let Some(bad) = va.data().iter().find(|&&x| x <= T::zero() || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad:?}")));
        }
        let out = va.map(T::ln);
        Ok(self.push(Op::Log(a), out, &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::abs);
        self.push(Op::Abs(a), out, &[a])
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: UnaryFn<T>, df: UnaryFn<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(Op::Map(a, df), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::of(va.len() as f64);
        self.push(Op::Mean(a), Tensor::scalar(m), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(format!(
                "concat on axis {axis}: {sa:?} and {sb:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va.data()[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&vb.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = sa[axis] + sb[axis];
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(Op::Concat(a, b, axis), out, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), out, &[a]))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || len == 0 || start + len > va.shape()[1] {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {}) of {:?}",
                start + len,
                va.shape()
            )));
        }
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_parts(vec![rows, len], data);
        Ok(self.push(Op::SliceCols(a, start), out, &[a]))
    }

    fn check_targets(&self, logits: Var, targets: &[usize], op: &str) -> Result<(usize, usize)> {
        let vl = self.value(logits);
        if vl.rank() != 2 {
            return Err(Error::shape(format!("{op}: logits must be a matrix")));
        }
        let (b, c) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != b {
            return Err(Error::shape(format!(
                "{op}: {} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("{op}: class {t} with {c} classes")));
        }
        Ok((b, c))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.check_targets(logits, targets, "softmax_cross_entropy")?;
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let lse = log_softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            total = total + (lse - row[targets[r]]);
        }
        let out = Tensor::scalar(total / T::of(b as f64));
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(op, out, &[logits]))
    }

    /// Per-row `log softmax(logits)[index]`, shape `[B]`.
    pub fn log_softmax_prob(&mut self, logits: Var, index: &[usize]) -> Result<Var> {
        let (b, c) = self.check_targets(logits, index, "log_softmax_prob")?;
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let lse = log_softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            out.push(row[index[r]] - lse);
        }
        let op = Op::LogSoftmaxPick {
            logits,
            index: index.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::from_parts(vec![b], out), &[logits]))
    }

    /// Sum of squared differences divided by the batch extent.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mse")?;
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let out = Tensor::scalar(s / T::of(batch_of(va) as f64));
        Ok(self.push(Op::Mse(a, b), out, &[a, b]))
    }

    /// Sum of absolute differences divided by the batch extent.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "l1")?;
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let out = Tensor::scalar(s / T::of(batch_of(va) as f64));
        Ok(self.push(Op::L1(a, b), out, &[a, b]))
    }

    /// Reverse sweep from a one-element `loss`, returning gradients of every
    /// node the loss depends on through differentiable paths. Intermediate
    /// gradients are released once propagated; leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut visits = vec![0u32; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, visits });
        }
        grads[loss.0] = Some(Tensor::from_parts(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if grads[i].is_some() {
                    visits[i] += 1;
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visits[i] += 1;
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, visits })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || zip_map(g, vb, |x, y| x * y));
                self.accumulate(grads, *b, || zip_map(g, va, |x, y| x * y));
            }
            Op::ScalarMul(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, || g.map(|x| x * k));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, || g.clone()),
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *bias, || {
                    let n = self.value(*bias).len();
                    let mut acc = vec![T::zero(); n];
                    for row in gd.chunks_exact(n) {
                        for (s, &x) in acc.iter_mut().zip(row) {
                            *s = *s + x;
                        }
                    }
                    Tensor::from_parts(vec![n], acc)
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.accumulate(grads, *a, || {
                    let bt = transpose(vb.data(), k, n);
                    let mut out = vec![T::zero(); m * k];
                    matmul_into(gd, &bt, &mut out, m, n, k);
                    Tensor::from_parts(vec![m, k], out)
                });
                self.accumulate(grads, *b, || {
                    let at = transpose(va.data(), m, k);
                    let mut out = vec![T::zero(); k * n];
                    matmul_into(&at, gd, &mut out, k, m, n);
                    Tensor::from_parts(vec![k, n], out)
                });
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let va = self.value(*a);
                self.accumulate(grads, *a, || {
                    zip_map(g, va, |gx, x| if x > T::zero() { gx } else { gx * slope })
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, || zip_map(g, y, |gx, s| gx * s * (T::one() - s)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, || zip_map(g, y, |gx, t| gx * (T::one() - t * t)));
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, || zip_map(g, y, |gx, e| gx * e));
            }
            Op::Log(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, || zip_map(g, va, |gx, x| gx / x));
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, || zip_map(g, va, |gx, x| gx * sign(x)));
            }
            Op::Map(a, df) => {
                let df = *df;
                let va = self.value(*a);
                self.accumulate(grads, *a, || zip_map(g, va, |gx, x| gx * df(x)));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, || self.value(*a).map(|_| s));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let s = gd[0] / T::of(va.len() as f64);
                self.accumulate(grads, *a, || va.map(|_| s));
            }
            Op::Concat(a, b, axis) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                let split = |first: bool| {
                    let mut out = Vec::with_capacity(outer * if first { ca } else { cb });
                    for o in 0..outer {
                        let base = o * (ca + cb);
                        if first {
                            out.extend_from_slice(&gd[base..base + ca]);
                        } else {
                            out.extend_from_slice(&gd[base + ca..base + ca + cb]);
                        }
                    }
                    out
                };
                self.accumulate(grads, *a, || Tensor::from_parts(sa.to_vec(), split(true)));
                self.accumulate(grads, *b, || Tensor::from_parts(sb.to_vec(), split(false)));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, || Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (rows, cols) = (va.shape()[0], va.shape()[1]);
                let len = node.value.shape()[1];
                self.accumulate(grads, *a, || {
                    let mut out = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        out[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                    Tensor::from_parts(vec![rows, cols], out)
                });
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = gd[0] / T::of(b as f64);
                self.accumulate(grads, *logits, || {
                    let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        out[r * c + t] = out[r * c + t] - scale;
                    }
                    Tensor::from_parts(vec![b, c], out)
                });
            }
            Op::LogSoftmaxPick {
                logits,
                index,
                probs,
            } => {
                let b = index.len();
                let c = probs.len() / b;
                self.accumulate(grads, *logits, || {
                    let mut out = vec![T::zero(); b * c];
                    for r in 0..b {
                        for j in 0..c {
                            out[r * c + j] = -gd[r] * probs[r * c + j];
                        }
                        out[r * c + index[r]] = out[r * c + index[r]] + gd[r];
                    }
                    Tensor::from_parts(vec![b, c], out)
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = T::of(2.0) * gd[0] / T::of(batch_of(va) as f64);
                self.accumulate(grads, *a, || zip_map(va, vb, |x, y| k * (x - y)));
                self.accumulate(grads, *b, || zip_map(va, vb, |x, y| k * (y - x)));
            }
            Op::L1(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = gd[0] / T::of(batch_of(va) as f64);
                self.accumulate(grads, *a, || zip_map(va, vb, |x, y| k * sign(x - y)));
                self.accumulate(grads, *b, || zip_map(va, vb, |x, y| k * sign(y - x)));
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        target: Var,
        contribution: impl FnOnce() -> Tensor<T>,
    ) {
        if !self.wants(target) {
            return;
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(c.data()) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::build(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let d = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(g.add(a, d).is_err());
        assert!(g.mul(a, d).is_err());
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1], &[2.0]));
        let b = g.param(t(&[1], &[5.0]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(a).unwrap().data(), &[5.0]);
        assert_eq!(gr.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn nonlinearity_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let m = g.constant(t(&[1], &[-1.0]));
        let l = g.leaky_relu(m, 0.2);
        assert!((g.value(l).item() + 0.2).abs() < 1e-15);
        assert!(g.log(m).is_err());
        let zero = g.constant(t(&[1], &[0.0]));
        assert!(g.log(zero).is_err());
    }

    #[test]
    fn reductions_and_concat() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[1], &[3.0]));
        let c = g.concat(a, b, 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let m = g.constant(t(&[2], &[2.0, 4.0]));
        let mean = g.mean(m);
        assert_eq!(g.value(mean).item(), 3.0);
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let xy = g.concat(x, y, 1).unwrap();
        assert_eq!(g.value(xy).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert!(g.concat(x, y, 0).is_err());
        assert!(g.reshape(x, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::zeros(&[1, 4]).unwrap());
        let l = g.softmax_cross_entropy(u, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let s = g.constant(t(&[1, 2], &[10.0, -10.0]));
        let l = g.softmax_cross_entropy(s, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-4);
        assert!(g.softmax_cross_entropy(s, &[2]).is_err());
        assert!(g.log_softmax_prob(s, &[0, 1]).is_err());
    }

    #[test]
    fn pixel_losses() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let m = g.mse(x, x).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[2.0, 0.0]));
        let l = g.l1(a, b).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
        let c = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(gr.get(x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn diamond_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.5, -3.0]));
        let p = g.mul(a, a).unwrap();
        let q = g.mul(a, a).unwrap();
        let y = g.add(p, q).unwrap();
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(a).unwrap().data(), &[6.0, -12.0]);
        // every reachable node ran exactly once
        for (i, &n) in gr.visit_counts().iter().enumerate() {
            assert_eq!(n, 1, "node {i}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.mul(a, a).unwrap();
        let d = g.detach(b);
        let s = g.sum(d);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(a).is_none());
    }

    #[test]
    fn sum_of_concat_equals_sum_of_parts() {
        let a = Tensor::<f32>::randn(&[17], 3).unwrap();
        let b = Tensor::<f32>::randn(&[9], 4).unwrap();
        let mut g = Graph::<f32>::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.concat(va, vb, 0).unwrap();
        let sc = g.sum(c);
        let sa = g.sum(va);
        let sb = g.sum(vb);
        let total = g.value(sc).item();
        let parts = g.value(sa).item() + g.value(sb).item();
        let tol = f32::EPSILON * total.abs().max(1.0) * 26.0;
        assert!((total - parts).abs() <= tol);
    }
}
