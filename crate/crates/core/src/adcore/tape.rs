//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! evaluation order, so node inputs always precede the node. [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use super::linalg::{self, Triangle};
use super::tensor::Tensor;
use super::AdError;

/// User-defined differentiable primitive.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Adjoints of every input given the output adjoint `grad`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    Erf(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Broadcast(usize),
    Cholesky(usize),
    TriSolve(usize, usize, Triangle),
    DiagExtract(usize),
    DiagEmbed(usize),
    LogdetFromChol(usize),
    Softmax(usize),
    Custom(Arc<dyn CustomOp>, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Erf(_) => "erf",
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Broadcast(_) => "broadcast",
            Op::Cholesky(_) => "cholesky",
            Op::TriSolve(_, _, Triangle::Lower) => "tri_solve_lower",
            Op::TriSolve(_, _, Triangle::Upper) => "tri_solve_upper",
            Op::DiagExtract(_) => "diag_extract",
            Op::DiagEmbed(_) => "diag_embed",
            Op::LogdetFromChol(_) => "logdet_from_chol",
            Op::Softmax(_) => "softmax",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Append-only record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
    first_nonfinite: Cell<Option<&'static str>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.grads[v.id].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the first primitive that yields a non-finite value.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    /// Name of the first primitive whose output was non-finite, when checking.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.first_nonfinite.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an independent input (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        if self.check_finite.get() && self.first_nonfinite.get().is_none() && !value.all_finite() {
            self.first_nonfinite.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Applies a user-defined primitive.
    pub fn custom<'t>(&'t self, op: Arc<dyn CustomOp>, inputs: &[Var<'t>]) -> Var<'t> {
        let vals: Vec<Arc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs);
        self.push(out, Op::Custom(op, inputs.iter().map(|v| v.id).collect()))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AdError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(AdError::NotScalar { shape: root_shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(root_shape, 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| nodes[i].value.as_ref();
            backprop(&node.op, val, node.value.as_ref(), &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch at node {id}");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` down to `shape` when the forward pass broadcast a scalar.
fn unbroadcast_scalar(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        debug_assert_eq!(shape.iter().product::<usize>(), 1);
        Tensor::new(shape.to_vec(), vec![g.sum()])
    }
}

fn backprop<'a>(op: &Op, val: impl Fn(usize) -> &'a Tensor, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate(grads, *a, unbroadcast_scalar(g.clone(), val(*a).shape()));
            accumulate(grads, *b, unbroadcast_scalar(g.map(|v| sign * v), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = binary_elementwise(g, bv, |g, b| g * b);
            let gb = binary_elementwise(g, av, |g, a| g * a);
            accumulate(grads, *a, unbroadcast_scalar(ga, av.shape()));
            accumulate(grads, *b, unbroadcast_scalar(gb, bv.shape()));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = binary_elementwise(g, bv, |g, b| g / b);
            // d(a/b)/db = -out / b
            let gb_full = binary_elementwise(&g.zip_map(out, |g, o| -g * o), bv, |x, b| x / b);
            accumulate(grads, *a, unbroadcast_scalar(ga, av.shape()));
            accumulate(grads, *b, unbroadcast_scalar(gb_full, bv.shape()));
        }
        Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
        Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |g, y| g * y)),
        Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Sqrt(a) => accumulate(grads, *a, g.zip_map(out, |g, y| 0.5 * g / y)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Softplus(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g * sigmoid(x))),
        Op::LeakyRelu(a, alpha) => {
            let alpha = *alpha;
            accumulate(grads, *a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { alpha * g }))
        }
        Op::Erf(a) => {
            let c = std::f64::consts::FRAC_2_SQRT_PI;
            accumulate(grads, *a, g.zip_map(val(*a), |g, x| g * c * (-x * x).exp()))
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), gv));
        }
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, *a, expand_axis(g, &shape, *axis));
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = linalg::matmul(g, bv, false, true);
            let mut gb = linalg::matmul(av, g, true, false);
            if ga.shape() != av.shape() {
                ga = sum_leading(ga, av.shape());
            }
            if gb.shape() != bv.shape() {
                gb = sum_leading(gb, bv.shape());
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Transpose(a) => accumulate(grads, *a, linalg::transpose(g)),
        Op::Reshape(a) => accumulate(grads, *a, g.clone().reshape(val(*a).shape().to_vec())),
        Op::Concat(ids, axis) => {
            let mut start = 0;
            for &id in ids {
                let len = val(id).shape()[*axis];
                accumulate(grads, id, slice_axis(g, *axis, start, start + len));
                start += len;
            }
        }
        Op::Slice(a, axis, start) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, *a, pad_axis(g, &shape, *axis, *start));
        }
        Op::Broadcast(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, *a, reduce_broadcast(g, &shape));
        }
        Op::Cholesky(a) => accumulate(grads, *a, linalg::cholesky_adjoint(out, g)),
        Op::TriSolve(t, b, tri) => {
            let tv = val(*t);
            // X = T⁻¹B: B̄ = T⁻ᵀ X̄, T̄ = -B̄ Xᵀ restricted to T's triangle
            let gb = linalg::tri_solve(tv, g, *tri, true);
            let mut gt = linalg::matmul(&gb, out, false, true);
            gt.data_mut().iter_mut().for_each(|v| *v = -*v);
            linalg::triangle_mask(&mut gt, *tri);
            if gt.shape() != tv.shape() {
                gt = sum_leading(gt, tv.shape());
            }
            accumulate(grads, *t, gt);
            accumulate(grads, *b, gb);
        }
        Op::DiagExtract(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, *a, diag_embed(g, &shape));
        }
        Op::DiagEmbed(a) => accumulate(grads, *a, diag_extract(g)),
        Op::LogdetFromChol(a) => {
            let l = val(*a);
            let (n, _) = l.rows_cols();
            let mut gl = Tensor::zeros(l.shape().to_vec());
            for (bi, (dst, src)) in gl.data_mut().chunks_mut(n * n).zip(l.data().chunks(n * n)).enumerate() {
                let gv = g.data()[bi];
                for i in 0..n {
                    dst[i * n + i] = 2.0 * gv / src[i * n + i];
                }
            }
            accumulate(grads, *a, gl);
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![0.0; out.len()];
            for ((dst, y), gy) in gx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dst[j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(grads, *a, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::Custom(op, ids) => {
            let inputs: Vec<&Tensor> = ids.iter().map(|&i| val(i)).collect();
            let gs = op.backward(&inputs, out, g);
            for (&id, gi) in ids.iter().zip(gs) {
                if let Some(gi) = gi {
                    assert_eq!(gi.shape(), val(id).shape(), "{}: adjoint shape mismatch", op.name());
                    accumulate(grads, id, gi);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Elementwise op where either side may be a rank-0 scalar.
fn binary_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.len() == 1 && b.rank() == 0 {
        let bv = b.item();
        a.map(|x| f(x, bv))
    } else if a.len() == 1 && a.rank() == 0 {
        let av = a.item();
        b.map(|x| f(av, x))
    } else {
        panic!("elementwise shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for k in 0..n {
            let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn expand_axis(g: &Tensor, full: &[usize], axis: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(full, axis);
    let mut out = vec![0.0; outer * n * inner];
    let gd = g.data();
    for o in 0..outer {
        for k in 0..n {
            out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(full.to_vec(), out)
}

fn slice_axis(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let len = end - start;
    let mut out = Vec::with_capacity(outer * len * inner);
    let d = x.data();
    for o in 0..outer {
        out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

fn pad_axis(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = split_at_axis(full, axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; outer * n * inner];
    let gd = g.data();
    for o in 0..outer {
        out[(o * n + start) * inner..(o * n + start + len) * inner]
            .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(full.to_vec(), out)
}

/// Sums a batched result over its leading dims to match an unbatched operand.
fn sum_leading(x: Tensor, target: &[usize]) -> Tensor {
    let chunk: usize = target.iter().product();
    let mut out = vec![0.0; chunk];
    for c in x.data().chunks(chunk) {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Right-aligned broadcast of `x` to `target` (numpy rules).
fn broadcast_to(x: &Tensor, target: &[usize]) -> Tensor {
    let src = x.shape();
    assert!(src.len() <= target.len(), "broadcast: cannot broadcast {src:?} to {target:?}");
    let pad = target.len() - src.len();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let t = target[pad + i];
        assert!(src[i] == t || src[i] == 1, "broadcast: cannot broadcast {src:?} to {target:?}");
        strides[pad + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n: usize = target.iter().product();
    let mut out = Vec::with_capacity(n);
    let d = x.data();
    let mut idx = vec![0usize; target.len()];
    let last = target.len();
    if n > 0 {
        loop {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(d[off]);
            let mut k = last;
            loop {
                if k == 0 {
                    return Tensor::new(target.to_vec(), out);
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < target[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    Tensor::new(target.to_vec(), out)
}

fn reduce_broadcast(g: &Tensor, src: &[usize]) -> Tensor {
    let target = g.shape();
    let pad = target.len() - src.len();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[pad + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut out = vec![0.0; src.iter().product()];
    let mut idx = vec![0usize; target.len()];
    for &v in g.data() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[off] += v;
        for k in (0..target.len()).rev() {
            idx[k] += 1;
            if idx[k] < target[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(src.to_vec(), out)
}

fn diag_extract(a: &Tensor) -> Tensor {
    let (n, m) = a.rows_cols();
    assert_eq!(n, m, "diag_extract: square matrices required, got {:?}", a.shape());
    let mut out = Vec::with_capacity(a.batch_count() * n);
    for c in a.data().chunks(n * n) {
        out.extend((0..n).map(|i| c[i * n + i]));
    }
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape[a.rank() - 2] = n;
    Tensor::new(shape, out)
}

fn diag_embed(v: &Tensor, full: &[usize]) -> Tensor {
    let n = *v.shape().last().expect("diag_embed of a scalar");
    let mut out = vec![0.0; v.len() * n];
    for (dst, src) in out.chunks_mut(n * n).zip(v.data().chunks(n)) {
        for i in 0..n {
            dst[i * n + i] = src[i];
        }
    }
    Tensor::new(full.to_vec(), out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = binary_elementwise(&a, &b, f);
        self.tape.push(out, op)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, alpha), move |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn erf(self) -> Var<'t> {
        self.unary(Op::Erf(self.id), libm::erf)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self.mul(k)
    }

    /// Adds a constant.
    pub fn shift(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self.add(k)
    }

    /// Sum of all entries (rank-0 result).
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let out = sum_axis(&self.value(), axis);
        self.tape.push(out, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Batched matrix product over the trailing two axes.
    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        let out = linalg::matmul(&self.value(), &o.value(), false, false);
        self.tape.push(out, Op::Matmul(self.id, o.id))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(self) -> Var<'t> {
        let out = linalg::transpose(&self.value());
        self.tape.push(out, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let out = self.value().as_ref().clone().reshape(shape);
        self.tape.push(out, Op::Reshape(self.id))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut shape = vals[0].shape().to_vec();
        for v in &vals[1..] {
            let s = v.shape();
            assert!(
                s.len() == shape.len() && s.iter().enumerate().all(|(i, &e)| i == axis || e == shape[i]),
                "concat: incompatible shapes {:?} and {:?}",
                shape,
                s
            );
        }
        shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        tape.push(Tensor::new(shape, out), Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        assert!(start <= end && end <= v.shape()[axis], "slice {start}..{end} out of range for {:?}", v.shape());
        let out = slice_axis(&v, axis, start, end);
        self.tape.push(out, Op::Slice(self.id, axis, start))
    }

    /// Right-aligned broadcast to `shape`.
    pub fn broadcast(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let v = self.value();
        if v.shape() == shape.as_slice() {
            return self;
        }
        let out = broadcast_to(&v, &shape);
        self.tape.push(out, Op::Broadcast(self.id))
    }

    /// Lower Cholesky factor of every trailing square matrix.
    pub fn cholesky(self) -> Result<Var<'t>, AdError> {
        let out = linalg::cholesky(&self.value())
            .map_err(|e| AdError::NotPositiveDefinite { batch: e.batch, pivot: e.pivot })?;
        Ok(self.tape.push(out, Op::Cholesky(self.id)))
    }

    /// `self⁻¹ b` with `self` lower triangular.
    pub fn tri_solve_lower(self, b: Var<'t>) -> Var<'t> {
        let out = linalg::tri_solve(&self.value(), &b.value(), Triangle::Lower, false);
        self.tape.push(out, Op::TriSolve(self.id, b.id, Triangle::Lower))
    }

    /// `self⁻¹ b` with `self` upper triangular.
    pub fn tri_solve_upper(self, b: Var<'t>) -> Var<'t> {
        let out = linalg::tri_solve(&self.value(), &b.value(), Triangle::Upper, false);
        self.tape.push(out, Op::TriSolve(self.id, b.id, Triangle::Upper))
    }

    pub fn diag_extract(self) -> Var<'t> {
        let out = diag_extract(&self.value());
        self.tape.push(out, Op::DiagExtract(self.id))
    }

    pub fn diag_embed(self) -> Var<'t> {
        let v = self.value();
        let mut shape = v.shape().to_vec();
        shape.push(*shape.last().expect("diag_embed of a scalar"));
        let out = diag_embed(&v, &shape);
        self.tape.push(out, Op::DiagEmbed(self.id))
    }

    /// `log det(L Lᵀ) = 2 Σ log Lᵢᵢ` per matrix.
    pub fn logdet_from_chol(self) -> Var<'t> {
        let v = self.value();
        let (n, _) = v.rows_cols();
        let out: Vec<f64> =
            v.data().chunks(n * n).map(|c| (0..n).map(|i| c[i * n + i].ln()).sum::<f64>() * 2.0).collect();
        let shape = v.shape()[..v.rank() - 2].to_vec();
        self.tape.push(Tensor::new(shape, out), Op::LogdetFromChol(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let n = *v.shape().last().expect("softmax of a scalar");
        let mut out = vec![0.0; v.len()];
        for (dst, src) in out.chunks_mut(n).zip(v.data().chunks(n)) {
            let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mx).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        self.tape.push(Tensor::new(v.shape().to_vec(), out), Op::Softmax(self.id))
    }

    /// `log Σ exp` over the last axis, shifted by the (constant) maximum.
    pub fn logsumexp_last(self) -> Var<'t> {
        let shape = self.shape();
        let n = *shape.last().expect("logsumexp of a scalar");
        let v = self.value();
        let maxes: Vec<f64> = v.data().chunks(n).map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut kshape = shape.clone();
        *kshape.last_mut().unwrap() = 1;
        let reduced_shape = shape[..shape.len() - 1].to_vec();
        let shift = self.tape.constant(Tensor::new(kshape, maxes.clone()));
        let centered = self.sub(shift.broadcast(shape.clone()));
        let last = shape.len() - 1;
        let lse = centered.exp().sum_axis(last).log();
        lse.add(self.tape.constant(Tensor::new(reduced_shape, maxes)))
    }
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident) => {
        impl<'t> std::ops::$tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                Var::$m(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
impl_binop!(Div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}
