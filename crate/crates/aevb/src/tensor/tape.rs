//! The Wengert list: forward values are recorded as they are computed and
//! a single reverse sweep produces gradients.
//!
//! A [`Tape`] owns a growing vector of nodes behind a `RefCell`, so it is
//! inherently single-threaded; independent tapes on different threads never
//! share state. A [`Var`] is a `Copy` handle (tape reference + node index).
//! Named operations return `Result` and validate shapes/domains up front;
//! the arithmetic operator impls are thin panicking sugar over the same
//! checked paths for code whose shapes are correct by construction.
//!
//! Broadcasting is deliberately narrow: two operands combine elementwise
//! when their shapes match exactly, or when one shape is a trailing suffix
//! of the other (the suffix operand is repeated over the leading axes).
//! That covers a `(batch, d)` activation against a `(d,)` bias and scalars
//! (rank 0) against anything, and nothing else.

use super::{SeededRng, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    /// Softmax over the last axis.
    Softmax(usize),
    /// Log-softmax over the last axis.
    LogSoftmax(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    Concat { srcs: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize, len: usize },
    Reshape(usize),
    Transpose(usize),
    DiagPart(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    /// Inverted dropout: kept entries are scaled by 1/(1-rate) at train
    /// time so no rescaling is needed at evaluation time.
    Dropout { src: usize, scale: f64, mask: Vec<bool> },
    /// Log normalizing constant of the continuous Bernoulli, elementwise.
    CbLogNorm(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id {}, shape {:?})", self.id, self.shape())
    }
}

/// Gradients from one reverse sweep, indexed by the `Var`s of the tape
/// that produced them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient accumulated for `v`, if any reached it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// The gradient for `v`, with zeros standing in for a leaf the loss
    /// never touched.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

// ---------------------------------------------------------------------------
// shape helpers

/// Outcome of the suffix-broadcast check: the common output shape.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::ShapeMismatch {
        op,
        shapes: vec![a.to_vec(), b.to_vec()],
        detail: "shapes must match or one must be a trailing suffix of the other".into(),
    })
}

/// Expands `t` (whose shape is a suffix of `shape`) by repetition.
fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let numel: usize = shape.iter().product();
    let block = t.numel();
    let mut data = Vec::with_capacity(numel);
    let reps = numel / block;
    for _ in 0..reps {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(shape.to_vec(), data).expect("broadcast_to shape product")
}

/// Reduces a gradient of the broadcast output shape back to the operand
/// shape by summing over the leading axes.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let block: usize = shape.iter().product();
    let mut out = vec![0.0; block];
    if block == 0 {
        return Tensor::from_vec(shape.to_vec(), out).unwrap();
    }
    for chunk in g.data().chunks(block) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Tensor::from_vec(shape.to_vec(), out).unwrap()
}

/// (outer, axis length, inner) strides around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// log C(lambda) for the continuous Bernoulli, with a Taylor branch in
/// u = 1 - 2*lambda near lambda = 1/2 where the closed form is 0/0.
pub(crate) fn cb_log_norm_scalar(lambda: f64) -> f64 {
    let u = 1.0 - 2.0 * lambda;
    if u.abs() < 2e-2 {
        // C = 2 (1 + u^2/3 + u^4/5 + O(u^6)); the truncation error at the
        // branch edge is ~u^6/7 ≈ 9e-12.
        let s = u * u;
        std::f64::consts::LN_2 + (s / 3.0 + s * s / 5.0).ln_1p()
    } else {
        let a = u.abs();
        std::f64::consts::LN_2 + a.atanh().ln() - a.ln()
    }
}

/// d/d lambda of `cb_log_norm_scalar`, on the matching branch.
pub(crate) fn cb_log_norm_grad_scalar(lambda: f64) -> f64 {
    let u = 1.0 - 2.0 * lambda;
    if u.abs() < 2e-2 {
        let s = u * u;
        let num = 2.0 * u / 3.0 + 4.0 * u * s / 5.0;
        let den = 1.0 + s / 3.0 + s * s / 5.0;
        -2.0 * num / den
    } else {
        let at = u.atanh();
        -2.0 * (u / (1.0 - u * u) - at) / (u * at)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Records a differentiable leaf (a parameter).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn value_clone(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn binary_elementwise(
        &self,
        op_name: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'_>> {
        let (va, vb) = (self.value_clone(a.id), self.value_clone(b.id));
        let out_shape = broadcast_shape(op_name, va.shape(), vb.shape())?;
        let ba = broadcast_to(&va, &out_shape);
        let bb = broadcast_to(&vb, &out_shape);
        let data: Vec<f64> =
            ba.data().iter().zip(bb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(out_shape, data)?;
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(make(a.id, b.id), value, rg))
    }

    fn unary(
        &self,
        src: Var<'_>,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> Op,
    ) -> Var<'_> {
        let value = self.with_value(src.id, |v| v.map(&f));
        let rg = self.rg(src.id);
        self.push(make(src.id), value, rg)
    }

    pub fn add(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        let ok = self.with_value(b.id, |v| v.data().iter().all(|&x| x != 0.0));
        if !ok {
            return Err(Error::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn matmul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        let (va, vb) = (self.value_clone(a.id), self.value_clone(b.id));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                shapes: vec![sa, sb],
                detail: "expects (m,k) x (k,n)".into(),
            });
        }
        let value = matmul_raw(&va, &vb);
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::Matmul(a.id, b.id), value, rg))
    }

    pub fn neg(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn exp(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&self, a: Var<'_>) -> Result<Var<'_>> {
        let ok = self.with_value(a.id, |v| v.data().iter().all(|&x| x > 0.0));
        if !ok {
            return Err(Error::Domain {
                op: "log",
                detail: "argument must be strictly positive".into(),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log))
    }

    pub fn abs(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn softplus(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, stable_softplus, Op::Softplus)
    }

    pub fn sigmoid(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, stable_sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    fn softmax_value(v: &Tensor, log_form: bool) -> Result<Tensor> {
        if v.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                shapes: vec![vec![]],
                detail: "needs at least one axis".into(),
            });
        }
        let last = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x -= m;
                total += x.exp();
            }
            let log_total = total.ln();
            for x in row.iter_mut() {
                *x = if log_form { *x - log_total } else { (*x - log_total).exp() };
            }
        }
        Tensor::from_vec(v.shape().to_vec(), data)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, a: Var<'_>) -> Result<Var<'_>> {
        let value = self.with_value(a.id, |v| Self::softmax_value(v, false))?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::Softmax(a.id), value, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var<'_>) -> Result<Var<'_>> {
        let value = self.with_value(a.id, |v| Self::softmax_value(v, true))?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::LogSoftmax(a.id), value, rg))
    }

    pub fn sum_all(&self, a: Var<'_>) -> Var<'_> {
        let value = self.with_value(a.id, |v| Tensor::scalar(v.data().iter().sum()));
        let rg = self.rg(a.id);
        self.push(Op::SumAll(a.id), value, rg)
    }

    pub fn mean_all(&self, a: Var<'_>) -> Var<'_> {
        let value = self.with_value(a.id, |v| {
            Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64)
        });
        let rg = self.rg(a.id);
        self.push(Op::MeanAll(a.id), value, rg)
    }

    /// Sums over one axis, removing it from the shape.
    pub fn sum_axis(&self, a: Var<'_>, axis: usize) -> Result<Var<'_>> {
        let v = self.value_clone(a.id);
        if axis >= v.shape().len() {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                shapes: vec![v.shape().to_vec()],
                detail: format!("axis {axis} out of range"),
            });
        }
        let (outer, n, inner) = around_axis(v.shape(), axis);
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    data[obase + i] += v.data()[base + i];
                }
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::SumAxis(a.id, axis), value, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                shapes: vec![],
                detail: "needs at least one input".into(),
            });
        }
        let shapes: Vec<Vec<usize>> =
            parts.iter().map(|p| self.with_value(p.id, |v| v.shape().to_vec())).collect();
        let rank = shapes[0].len();
        if axis >= rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                shapes,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = 0;
        for s in &shapes {
            let mut t = s.clone();
            if t.len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    shapes,
                    detail: "inputs must have equal rank".into(),
                });
            }
            t[axis] = 0;
            let mut r = out_shape.clone();
            r[axis] = 0;
            if t != r {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    shapes,
                    detail: format!("extents differ outside axis {axis}"),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, total_axis, _) = around_axis(&out_shape, axis);
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for (p, s) in parts.iter().zip(&shapes) {
            let n = s[axis];
            self.with_value(p.id, |v| {
                for o in 0..outer {
                    let src = &v.data()[o * n * inner..(o + 1) * n * inner];
                    let dst_base = (o * total_axis + offset) * inner;
                    data[dst_base..dst_base + n * inner].copy_from_slice(src);
                }
            });
            offset += n;
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(Op::Concat { srcs: parts.iter().map(|p| p.id).collect(), axis }, value, rg))
    }

    /// Takes `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(&self, a: Var<'_>, axis: usize, start: usize, len: usize) -> Result<Var<'_>> {
        let v = self.value_clone(a.id);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                shapes: vec![shape],
                detail: format!("slice [{start}, {start}+{len}) out of range on axis {axis}"),
            });
        }
        let (outer, n, inner) = around_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let value = Tensor::from_vec(out_shape, data)?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::Slice { src: a.id, axis, start, len }, value, rg))
    }

    pub fn reshape(&self, a: Var<'_>, shape: &[usize]) -> Result<Var<'_>> {
        let value = self.with_value(a.id, |v| v.reshaped(shape))?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::Reshape(a.id), value, rg))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, a: Var<'_>) -> Result<Var<'_>> {
        let v = self.value_clone(a.id);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                shapes: vec![v.shape().to_vec()],
                detail: "expects rank 2".into(),
            });
        }
        let value = transpose_raw(&v);
        let rg = self.rg(a.id);
        Ok(self.push(Op::Transpose(a.id), value, rg))
    }

    /// Main diagonal of a square rank-2 tensor, as a vector.
    pub fn diag_part(&self, a: Var<'_>) -> Result<Var<'_>> {
        let v = self.value_clone(a.id);
        let s = v.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::ShapeMismatch {
                op: "diag_part",
                shapes: vec![s.to_vec()],
                detail: "expects a square matrix".into(),
            });
        }
        let n = s[0];
        let data: Vec<f64> = (0..n).map(|i| v.data()[i * n + i]).collect();
        let value = Tensor::from_vec(vec![n], data)?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::DiagPart(a.id), value, rg))
    }

    /// Clamps into [lo, hi]; gradient passes only through the interior
    /// (boundary values inclusive).
    pub fn clamp(&self, a: Var<'_>, lo: f64, hi: f64) -> Result<Var<'_>> {
        if !(lo <= hi) {
            return Err(Error::Domain { op: "clamp", detail: format!("lo {lo} > hi {hi}") });
        }
        let value = self.with_value(a.id, |v| v.map(|x| x.clamp(lo, hi)));
        let rg = self.rg(a.id);
        Ok(self.push(Op::Clamp { src: a.id, lo, hi }, value, rg))
    }

    /// Inverted dropout: each entry is zeroed with probability `rate`,
    /// survivors are scaled by 1/(1-rate). The mask is drawn from `rng` in
    /// element order and stored for the backward sweep.
    pub fn dropout(&self, a: Var<'_>, rate: f64, rng: &mut SeededRng) -> Result<Var<'_>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let v = self.value_clone(a.id);
        let mask: Vec<bool> = (0..v.numel()).map(|_| rng.bernoulli(keep)).collect();
        let data: Vec<f64> = v
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { x * scale } else { 0.0 })
            .collect();
        let value = Tensor::from_vec(v.shape().to_vec(), data)?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::Dropout { src: a.id, scale, mask }, value, rg))
    }

    /// Elementwise log normalizing constant of the continuous Bernoulli;
    /// inputs must lie strictly inside (0, 1).
    pub fn cb_log_normalizer(&self, a: Var<'_>) -> Result<Var<'_>> {
        let ok = self.with_value(a.id, |v| v.data().iter().all(|&x| x > 0.0 && x < 1.0));
        if !ok {
            return Err(Error::Domain {
                op: "cb_log_normalizer",
                detail: "lambda must lie strictly inside (0, 1)".into(),
            });
        }
        Ok(self.unary(a, cb_log_norm_scalar, Op::CbLogNorm))
    }

    /// Reverse sweep from a scalar loss. Visits each node exactly once in
    /// reverse recording order; leaves the loss never touched simply get no
    /// entry (queried as zeros).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let ln = &nodes[loss.id];
        if ln.value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: ln.value.shape().to_vec() });
        }
        if !ln.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_vec(
            ln.value.shape().to_vec(),
            vec![1.0],
        )?);

        // Local accumulate helper: adds `contrib` (already in the operand's
        // own shape) into the operand's slot.
        fn accum(grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
            match &mut grads[id] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(contrib),
            }
        }

        for id in (0..nodes.len()).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => continue,
                Op::Add(a, b) => {
                    if nodes[*a].requires_grad {
                        accum(&mut grads, *a, reduce_to(&g, nodes[*a].value.shape()));
                    }
                    if nodes[*b].requires_grad {
                        accum(&mut grads, *b, reduce_to(&g, nodes[*b].value.shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].requires_grad {
                        accum(&mut grads, *a, reduce_to(&g, nodes[*a].value.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let neg = g.map(|x| -x);
                        accum(&mut grads, *b, reduce_to(&neg, nodes[*b].value.shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = node.value.shape();
                    if nodes[*a].requires_grad {
                        let vb = broadcast_to(&nodes[*b].value, out_shape);
                        let contrib = elementwise(&g, &vb, |x, y| x * y);
                        accum(&mut grads, *a, reduce_to(&contrib, nodes[*a].value.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let va = broadcast_to(&nodes[*a].value, out_shape);
                        let contrib = elementwise(&g, &va, |x, y| x * y);
                        accum(&mut grads, *b, reduce_to(&contrib, nodes[*b].value.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let out_shape = node.value.shape();
                    let vb = broadcast_to(&nodes[*b].value, out_shape);
                    if nodes[*a].requires_grad {
                        let contrib = elementwise(&g, &vb, |x, y| x / y);
                        accum(&mut grads, *a, reduce_to(&contrib, nodes[*a].value.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let va = broadcast_to(&nodes[*a].value, out_shape);
                        let mut contrib = elementwise(&g, &va, |x, y| x * y);
                        for (c, d) in contrib.data_mut().iter_mut().zip(vb.data()) {
                            *c = -*c / (d * d);
                        }
                        accum(&mut grads, *b, reduce_to(&contrib, nodes[*b].value.shape()));
                    }
                }
                Op::Matmul(a, b) => {
                    // dA = G B^T, dB = A^T G.
                    if nodes[*a].requires_grad {
                        accum(&mut grads, *a, matmul_nt(&g, &nodes[*b].value));
                    }
                    if nodes[*b].requires_grad {
                        accum(&mut grads, *b, matmul_tn(&nodes[*a].value, &g));
                    }
                }
                Op::Neg(a) => accum(&mut grads, *a, g.map(|x| -x)),
                Op::Exp(a) => accum(&mut grads, *a, elementwise(&g, &node.value, |x, y| x * y)),
                Op::Log(a) => {
                    accum(&mut grads, *a, elementwise(&g, &nodes[*a].value, |x, y| x / y))
                }
                Op::Abs(a) => {
                    let contrib =
                        elementwise(&g, &nodes[*a].value, |x, y| x * if y < 0.0 { -1.0 } else if y > 0.0 { 1.0 } else { 0.0 });
                    accum(&mut grads, *a, contrib)
                }
                Op::Softplus(a) => {
                    let contrib =
                        elementwise(&g, &nodes[*a].value, |x, y| x * stable_sigmoid(y));
                    accum(&mut grads, *a, contrib)
                }
                Op::Sigmoid(a) => {
                    let contrib = elementwise(&g, &node.value, |x, s| x * s * (1.0 - s));
                    accum(&mut grads, *a, contrib)
                }
                Op::Tanh(a) => {
                    let contrib = elementwise(&g, &node.value, |x, t| x * (1.0 - t * t));
                    accum(&mut grads, *a, contrib)
                }
                Op::Relu(a) => {
                    let contrib =
                        elementwise(&g, &nodes[*a].value, |x, y| if y > 0.0 { x } else { 0.0 });
                    accum(&mut grads, *a, contrib)
                }
                Op::Softmax(a) => {
                    // ds = s ∘ (g - <g, s>_row)
                    let s = &node.value;
                    let last = *s.shape().last().unwrap();
                    let mut out = g.clone();
                    for (orow, srow) in
                        out.data_mut().chunks_mut(last).zip(s.data().chunks(last))
                    {
                        let dot: f64 =
                            orow.iter().zip(srow).map(|(&gv, &sv)| gv * sv).sum();
                        for (o, &sv) in orow.iter_mut().zip(srow) {
                            *o = (*o - dot) * sv;
                        }
                    }
                    accum(&mut grads, *a, out)
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax ∘ rowsum(g)
                    let last = *node.value.shape().last().unwrap();
                    let mut out = g.clone();
                    for (orow, lrow) in
                        out.data_mut().chunks_mut(last).zip(node.value.data().chunks(last))
                    {
                        let total: f64 = orow.iter().sum();
                        for (o, &lv) in orow.iter_mut().zip(lrow) {
                            *o -= lv.exp() * total;
                        }
                    }
                    accum(&mut grads, *a, out)
                }
                Op::SumAll(a) => {
                    let gv = g.scalar_value();
                    accum(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv))
                }
                Op::MeanAll(a) => {
                    let n = nodes[*a].value.numel() as f64;
                    let gv = g.scalar_value() / n;
                    accum(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv))
                }
                Op::SumAxis(a, axis) => {
                    let src_shape = nodes[*a].value.shape().to_vec();
                    let (outer, n, inner) = around_axis(&src_shape, *axis);
                    let mut data = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let gbase = o * inner;
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            data[base..base + inner]
                                .copy_from_slice(&g.data()[gbase..gbase + inner]);
                        }
                    }
                    accum(&mut grads, *a, Tensor::from_vec(src_shape, data).unwrap())
                }
                Op::Concat { srcs, axis } => {
                    let out_shape = node.value.shape().to_vec();
                    let (outer, total_axis, _) = around_axis(&out_shape, *axis);
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let mut offset = 0;
                    for src in srcs {
                        let n = nodes[*src].value.shape()[*axis];
                        if nodes[*src].requires_grad {
                            let mut data = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let base = (o * total_axis + offset) * inner;
                                data.extend_from_slice(&g.data()[base..base + n * inner]);
                            }
                            let shape = nodes[*src].value.shape().to_vec();
                            accum(&mut grads, *src, Tensor::from_vec(shape, data).unwrap());
                        }
                        offset += n;
                    }
                }
                Op::Slice { src, axis, start, len } => {
                    let src_shape = nodes[*src].value.shape().to_vec();
                    let (outer, n, inner) = around_axis(&src_shape, *axis);
                    let mut data = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let dbase = (o * n + start) * inner;
                        let gbase = o * len * inner;
                        data[dbase..dbase + len * inner]
                            .copy_from_slice(&g.data()[gbase..gbase + len * inner]);
                    }
                    accum(&mut grads, *src, Tensor::from_vec(src_shape, data).unwrap())
                }
                Op::Reshape(a) => {
                    let src_shape = nodes[*a].value.shape().to_vec();
                    accum(&mut grads, *a, g.reshaped(&src_shape).unwrap())
                }
                Op::Transpose(a) => accum(&mut grads, *a, transpose_raw(&g)),
                Op::DiagPart(a) => {
                    let n = nodes[*a].value.shape()[0];
                    let mut data = vec![0.0; n * n];
                    for i in 0..n {
                        data[i * n + i] = g.data()[i];
                    }
                    accum(&mut grads, *a, Tensor::from_vec(vec![n, n], data).unwrap())
                }
                Op::Clamp { src, lo, hi } => {
                    let contrib = elementwise(&g, &nodes[*src].value, |x, y| {
                        if y >= *lo && y <= *hi {
                            x
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads, *src, contrib)
                }
                Op::Dropout { src, scale, mask } => {
                    let mut contrib = g.clone();
                    for (c, &m) in contrib.data_mut().iter_mut().zip(mask) {
                        *c = if m { *c * scale } else { 0.0 };
                    }
                    accum(&mut grads, *src, contrib)
                }
                Op::CbLogNorm(a) => {
                    let contrib = elementwise(&g, &nodes[*a].value, |x, lam| {
                        x * cb_log_norm_grad_scalar(lam)
                    });
                    accum(&mut grads, *a, contrib)
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

/// C = A B with (m,k) x (k,n), ikj loop order for cache-friendly rows.
pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], c).unwrap()
}

/// G B^T with G (m,n), B (k,n) -> (m,k): row-dot-row, no materialized transpose.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            let mut dot = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                dot += x * y;
            }
            out[i * k + p] = dot;
        }
    }
    Tensor::from_vec(vec![m, k], out).unwrap()
}

/// A^T G with A (m,k), G (m,n) -> (k,n): accumulate scaled G rows.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        let arow = &a.data()[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    Tensor::from_vec(vec![k, n], out).unwrap()
}

pub(crate) fn transpose_raw(v: &Tensor) -> Tensor {
    let (m, n) = (v.shape()[0], v.shape()[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = v.data()[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], data).unwrap()
}

// ---------------------------------------------------------------------------
// Var surface

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_clone(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn matmul(self, other: Var<'t>) -> crate::Result<Var<'t>> {
        self.tape.matmul(self, other)
    }

    /// Rank-2 transpose.
    pub fn t(self) -> crate::Result<Var<'t>> {
        self.tape.transpose(self)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.exp(self)
    }

    pub fn log(self) -> crate::Result<Var<'t>> {
        self.tape.log(self)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.abs(self)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.softplus(self)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.sigmoid(self)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.tanh(self)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.relu(self)
    }

    pub fn softmax(self) -> crate::Result<Var<'t>> {
        self.tape.softmax(self)
    }

    pub fn log_softmax(self) -> crate::Result<Var<'t>> {
        self.tape.log_softmax(self)
    }

    pub fn sum_all(self) -> Var<'t> {
        self.tape.sum_all(self)
    }

    pub fn mean_all(self) -> Var<'t> {
        self.tape.mean_all(self)
    }

    pub fn sum_axis(self, axis: usize) -> crate::Result<Var<'t>> {
        self.tape.sum_axis(self, axis)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> crate::Result<Var<'t>> {
        self.tape.slice(self, axis, start, len)
    }

    pub fn reshape(self, shape: &[usize]) -> crate::Result<Var<'t>> {
        self.tape.reshape(self, shape)
    }

    pub fn diag_part(self) -> crate::Result<Var<'t>> {
        self.tape.diag_part(self)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> crate::Result<Var<'t>> {
        self.tape.clamp(self, lo, hi)
    }

    pub fn dropout(self, rate: f64, rng: &mut SeededRng) -> crate::Result<Var<'t>> {
        self.tape.dropout(self, rate, rng)
    }

    pub fn cb_log_normalizer(self) -> crate::Result<Var<'t>> {
        self.tape.cb_log_normalizer(self)
    }

    /// x + c via a broadcast scalar constant.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.constant_scalar(c);
        self.tape.add(self, k).expect("scalar broadcast always fits")
    }

    /// x * c via a broadcast scalar constant.
    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.constant_scalar(c);
        self.tape.mul(self, k).expect("scalar broadcast always fits")
    }
}

macro_rules! panicking_binop {
    ($trait:ident, $method:ident, $checked:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.$checked(self, rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

panicking_binop!(Add, add, add);
panicking_binop!(Sub, sub, sub);
panicking_binop!(Mul, mul, mul);
panicking_binop!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.neg(self)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.mul_scalar(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;

    /// Mixed absolute/relative error: absolute below 1, relative above.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn matmul_identity_is_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = tape.constant(Tensor::eye(2));
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = x.softplus();
        assert!((y.value().scalar_value() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![0.7, 0.7, 0.7]).unwrap());
        let s = x.softmax().unwrap();
        for &v in s.value().data() {
            assert_eq!(v, 1.0 / 3.0);
        }
        let ls = x.log_softmax().unwrap();
        for &v in ls.value().data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn suffix_broadcast_add_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = (x + b).value();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        // Rank-0 broadcasts against everything.
        let s = tape.constant(Tensor::scalar(10.0));
        let x2 = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap());
        assert_eq!((x2 + s).value().data(), &[11.0; 4]);
    }

    #[test]
    fn illegal_broadcast_is_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        match tape.add(a, b) {
            Err(crate::Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.matmul(a, c).is_ok());
        assert!(tape.matmul(c, c).is_err());
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(crate::Error::Domain { op: "log", .. })));
        let y = tape.constant(Tensor::from_vec(vec![1], vec![2.0]).unwrap());
        let z = tape.constant(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        assert!(matches!(tape.div(y, z), Err(crate::Error::Domain { op: "div", .. })));
    }

    #[test]
    fn backward_of_x_squared_sum() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1], vec![3.0]).unwrap());
        let loss = (x * x).sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let loss = x.sigmoid().sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        match tape.backward(x) {
            Err(crate::Error::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected non-scalar loss error, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_constant_graph_is_detached() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let y = x.exp().sum_all();
        assert!(matches!(tape.backward(y), Err(crate::Error::DetachedGraph)));
    }

    #[test]
    fn untouched_leaf_reads_back_zeros() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(&[3]));
        let loss = x.sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused).data(), &[0.0, 0.0, 0.0]);
    }

    /// Re-runs a tape-built scalar function under central differences for
    /// every primitive that has a custom backward rule.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Builder = for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>;
        let cases: Vec<(&str, Builder, fn(&mut SeededRng) -> Tensor)> = vec![
            ("exp", |_, x| x.exp().sum_all(), |r| Tensor::randn(&[2, 3], r)),
            ("log", |_, x| x.log().unwrap().sum_all(), |r| {
                Tensor::randn(&[4], r).map(|v| v.abs() + 0.5)
            }),
            ("abs", |_, x| x.abs().sum_all(), |r| {
                Tensor::randn(&[5], r).map(|v| v + 0.2 * v.signum())
            }),
            ("softplus", |_, x| x.softplus().sum_all(), |r| Tensor::randn(&[3, 2], r)),
            ("sigmoid", |_, x| x.sigmoid().sum_all(), |r| Tensor::randn(&[6], r)),
            ("tanh", |_, x| x.tanh().sum_all(), |r| Tensor::randn(&[6], r)),
            ("relu", |_, x| x.relu().sum_all(), |r| {
                Tensor::randn(&[6], r).map(|v| v + 0.3 * v.signum())
            }),
            ("softmax", |t, x| {
                let w = t.constant(Tensor::from_vec(vec![2, 3], vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4]).unwrap());
                (x.softmax().unwrap() * w).sum_all()
            }, |r| Tensor::randn(&[2, 3], r)),
            ("log_softmax", |t, x| {
                let w = t.constant(Tensor::from_vec(vec![2, 3], vec![1.0, 0.5, -0.5, 0.2, 2.0, 1.0]).unwrap());
                (x.log_softmax().unwrap() * w).sum_all()
            }, |r| Tensor::randn(&[2, 3], r)),
            ("mean_all", |_, x| x.mean_all(), |r| Tensor::randn(&[3, 4], r)),
            ("sum_axis0", |_, x| {
                let w = x.tape().constant(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
                (x.sum_axis(0).unwrap() * w).sum_all()
            }, |r| Tensor::randn(&[2, 3], r)),
            ("transpose", |t, x| {
                let w = t.constant(Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.25, -2.0]).unwrap());
                (x.t().unwrap() * w).sum_all()
            }, |r| Tensor::randn(&[2, 3], r)),
            ("diag_part", |_, x| x.diag_part().unwrap().sum_all(), |r| Tensor::randn(&[3, 3], r)),
            ("slice", |_, x| x.slice(1, 1, 2).unwrap().sum_all(), |r| Tensor::randn(&[2, 4], r)),
            ("reshape", |_, x| {
                let r = x.reshape(&[6]).unwrap();
                (r * r).sum_all()
            }, |r| Tensor::randn(&[2, 3], r)),
            ("clamp", |_, x| x.clamp(-0.5, 0.5).unwrap().sum_all(), |r| Tensor::randn(&[8], r)),
            ("cb_log_normalizer", |_, x| x.cb_log_normalizer().unwrap().sum_all(), |r| {
                Tensor::from_vec(vec![4], (0..4).map(|_| r.uniform_in(0.05, 0.95)).collect()).unwrap()
            }),
        ];

        let mut rng = SeededRng::new(314);
        for (name, build, make_input) in cases {
            let x0 = make_input(&mut rng);
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let loss = build(&tape, x);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(x).unwrap().clone();
            let fd = finite_difference_gradient(
                |probe| {
                    let t = Tape::new();
                    let p = t.constant(probe.clone());
                    Ok(build(&t, p).value().scalar_value())
                },
                &x0,
                1e-6,
            )
            .unwrap();
            for (i, (&a, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
                assert!(
                    rel_err(a, f) < 1e-7,
                    "{name}[{i}]: analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn binary_op_gradients_match_finite_differences_with_broadcast() {
        // d/da and d/db of sum(w ∘ (a op b)) where b broadcasts over the
        // leading axis of a.
        let mut rng = SeededRng::new(99);
        let a0 = Tensor::randn(&[3, 2], &mut rng);
        let b0 = Tensor::randn(&[2], &mut rng).map(|v| v.abs() + 0.8);
        for op in ["add", "sub", "mul", "div", "matmul"] {
            let (a0, b0) = if op == "matmul" {
                (a0.clone(), Tensor::randn(&[2, 4], &mut rng))
            } else {
                (a0.clone(), b0.clone())
            };
            let run = |av: &Tensor, bv: &Tensor, wrt_a: bool| -> (f64, Option<Tensor>) {
                let tape = Tape::new();
                let a = tape.leaf(av.clone(), wrt_a);
                let b = tape.leaf(bv.clone(), !wrt_a);
                let y = match op {
                    "add" => tape.add(a, b).unwrap(),
                    "sub" => tape.sub(a, b).unwrap(),
                    "mul" => tape.mul(a, b).unwrap(),
                    "div" => tape.div(a, b).unwrap(),
                    _ => tape.matmul(a, b).unwrap(),
                };
                let loss = (y * y).sum_all();
                let grads = tape.backward(loss).unwrap();
                let g = if wrt_a { grads.get(a) } else { grads.get(b) };
                (loss.value().scalar_value(), g.cloned())
            };
            for wrt_a in [true, false] {
                let (_, g) = run(&a0, &b0, wrt_a);
                let analytic = g.unwrap();
                let target = if wrt_a { &a0 } else { &b0 };
                let fd = finite_difference_gradient(
                    |probe| {
                        let (av, bv) = if wrt_a {
                            (probe.clone(), b0.clone())
                        } else {
                            (a0.clone(), probe.clone())
                        };
                        Ok(run(&av, &bv, wrt_a).0)
                    },
                    target,
                    1e-6,
                )
                .unwrap();
                for (i, (&x, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
                    assert!(
                        rel_err(x, f) < 1e-7,
                        "{op} wrt {}[{i}]: analytic {x} vs fd {f}",
                        if wrt_a { "a" } else { "b" }
                    );
                }
            }
        }
    }

    #[test]
    fn dropout_scales_survivors_and_freezes_with_cloned_rng() {
        let base = SeededRng::new(7);
        let x0 = Tensor::ones(&[1000]);
        let run = |rng_seed: &SeededRng| {
            let mut rng = rng_seed.clone();
            let tape = Tape::new();
            let x = tape.constant(x0.clone());
            x.dropout(0.25, &mut rng).unwrap().value()
        };
        let a = run(&base);
        let b = run(&base);
        assert_eq!(a.data(), b.data(), "cloned rng must reproduce the mask");
        let kept = a.data().iter().filter(|&&v| v != 0.0).count();
        for &v in a.data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
        }
        // Keep rate 0.75 of 1000, loosely banded.
        assert!((kept as f64 - 750.0).abs() < 4.0 * (1000.0f64 * 0.25 * 0.75).sqrt() + 1.0);
        // Gradient passes exactly through the kept entries, scaled.
        let mut rng = base.clone();
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = x.dropout(0.25, &mut rng).unwrap().sum_all();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), a.data());
    }

    #[test]
    fn backward_is_deterministic_and_linear() {
        let mut rng = SeededRng::new(21);
        let x0 = Tensor::randn(&[4], &mut rng);
        let grad_of = |scale_f: f64, scale_g: f64| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let f = (x * x).sum_all();
            let g = x.tanh().sum_all();
            let loss = f * scale_f + g.mul_scalar(scale_g);
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().clone()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.0, -3.0);
        for i in 0..4 {
            let expect = 2.0 * gf.data()[i] - 3.0 * gg.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
        // Bit-identical replay.
        let again = grad_of(2.0, -3.0);
        for (a, b) in combined.data().iter().zip(again.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = c.slice(1, 2, 3).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        // Concat along axis 0 stacks rows.
        let v = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(v.shape(), vec![4, 2]);
        // Gradient splits cleanly.
        let tape2 = Tape::new();
        let p = tape2.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let q = tape2.param(Tensor::from_vec(vec![3], vec![3.0, 4.0, 5.0]).unwrap());
        let cat = tape2.concat(&[p, q], 0).unwrap();
        let w = tape2.constant(Tensor::from_vec(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let loss = (cat * w).sum_all();
        let grads = tape2.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(grads.get(q).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn cb_log_normalizer_branches_agree_at_the_seam() {
        // The closed form and the Taylor branch must hand off smoothly.
        for lam in [0.5 - 0.0201, 0.5 - 0.0199, 0.5 + 0.0199, 0.5 + 0.0201] {
            let exact = {
                let u: f64 = 1.0 - 2.0 * lam;
                let a = u.abs();
                std::f64::consts::LN_2 + a.atanh().ln() - a.ln()
            };
            assert!((cb_log_norm_scalar(lam) - exact).abs() < 1e-10, "lambda {lam}");
        }
        assert_eq!(cb_log_norm_scalar(0.5), std::f64::consts::LN_2);
    }

    #[test]
    fn three_layer_mlp_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(17);
        let x0 = Tensor::randn(&[2, 3], &mut rng);
        let w1 = Tensor::randn(&[3, 4], &mut rng);
        let w2 = Tensor::randn(&[4, 4], &mut rng);
        let w3 = Tensor::randn(&[4, 1], &mut rng);
        let forward = |wv: &Tensor, which: usize, want_grad: Option<usize>| {
            let tape = Tape::new();
            let x = tape.constant(x0.clone());
            let mk = |i: usize, v: &Tensor| {
                if i == which {
                    tape.leaf(wv.clone(), want_grad.is_some())
                } else {
                    tape.leaf(v.clone(), want_grad == Some(i))
                }
            };
            let p1 = mk(0, &w1);
            let p2 = mk(1, &w2);
            let p3 = mk(2, &w3);
            let h1 = x.matmul(p1).unwrap().tanh();
            let h2 = h1.matmul(p2).unwrap().relu();
            let out = h2.matmul(p3).unwrap().sum_all();
            if let Some(i) = want_grad {
                let grads = tape.backward(out).unwrap();
                let target = [p1, p2, p3][i];
                (out.value().scalar_value(), Some(grads.get_or_zeros(target)))
            } else {
                (out.value().scalar_value(), None)
            }
        };
        for (i, w) in [&w1, &w2, &w3].into_iter().enumerate() {
            let (_, g) = forward(w, i, Some(i));
            let analytic = g.unwrap();
            let fd = finite_difference_gradient(
                |probe| Ok(forward(probe, i, None).0),
                w,
                1e-6,
            )
            .unwrap();
            for (j, (&a, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
                assert!(rel_err(a, f) < 1e-6, "w{i}[{j}]: {a} vs {f}");
            }
        }
    }
}
