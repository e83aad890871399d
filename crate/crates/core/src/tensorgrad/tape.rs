use super::kernels as k;
use super::tensor::{sum_to_shape, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
    Relu,
    Gelu,
}

/// Reduction selector for [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    Sum { x: Var, axis: Option<usize> },
    Max { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the tape is always
/// topologically sorted. Gradients of leaves that require them accumulate
/// across [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, true, "param")
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Copies `x` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, x: Var) -> Option<&Tensor> {
        self.grads[x.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, xs: &[Var]) -> bool {
        xs.iter().any(|x| self.nodes[x.0].requires_grad)
    }

    fn binary_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let value = k::binary(self.value(a), self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    fn unary_op(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let value = k::unary(self.value(x), f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg, name)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let need = |b: Option<Var>| b.ok_or(TensorError::MissingOperand);
        match op {
            ElementwiseOp::Add => self.add(a, need(b)?),
            ElementwiseOp::Sub => self.sub(a, need(b)?),
            ElementwiseOp::Mul => self.mul(a, need(b)?),
            ElementwiseOp::Div => self.div(a, need(b)?),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Neg => self.neg(a),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Gelu => self.gelu(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::Domain { op: "div", what: "zero divisor" });
        }
        self.binary_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary_op(x, "neg", |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary_op(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log", what: "non-positive input" });
        }
        self.unary_op(x, "log", f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary_op(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary_op(x, "gelu", gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary_op(x, "softplus", softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "sqrt", what: "non-positive input" });
        }
        self.unary_op(x, "sqrt", f64::sqrt, Op::Sqrt(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        self.unary_op(x, "powf", |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        self.unary_op(x, "scale", |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary_op(x, "add_scalar", |v| v + c, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = k::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), TensorError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis(axis));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let value = k::softmax(self.value(x), axis);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x, axis), rg, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let xv = self.value(x);
        let lse = k::logsumexp(xv, axis);
        let lse = k::expand_axis(&lse, xv.shape(), axis);
        let value = k::binary(xv, &lse, |a, b| a - b)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x, axis), rg, "log_softmax")
    }

    /// Log-sum-exp along `axis`; the axis is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let value = k::logsumexp(self.value(x), axis);
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSumExp(x, axis), rg, "logsumexp")
    }

    /// Reduction over `axis` (removed), or over every element when `axis` is `None`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce_keep(op, x, axis, false)
    }

    pub fn reduce_keep(&mut self, op: ReduceOp, x: Var, axis: Option<usize>, keepdim: bool) -> Result<Var, TensorError> {
        let n = match axis {
            Some(ax) => {
                self.check_axis(x, ax)?;
                self.shape(x)[ax]
            }
            None => {
                if self.value(x).numel() == 0 {
                    return Err(TensorError::EmptyAxis(0));
                }
                self.value(x).numel()
            }
        };
        match op {
            ReduceOp::Sum => self.sum_impl(x, axis, keepdim),
            ReduceOp::Mean => {
                let s = self.sum_impl(x, axis, keepdim)?;
                self.scale(s, 1.0 / n as f64)
            }
            ReduceOp::Max => {
                let (value, argmax) = match axis {
                    Some(ax) => k::max_axis(self.value(x), ax, keepdim),
                    None => {
                        let flat = self.value(x).reshape(&[n]).expect("flat");
                        let (v, a) = k::max_axis(&flat, 0, false);
                        let shape = if keepdim { vec![1; self.shape(x).len()] } else { vec![] };
                        (v.reshape(&shape).expect("scalar"), a)
                    }
                };
                let rg = self.rg(&[x]);
                self.push(value, Op::Max { x, argmax }, rg, "max")
            }
        }
    }

    fn sum_impl(&mut self, x: Var, axis: Option<usize>, keepdim: bool) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let value = match axis {
            Some(ax) => k::sum_axis(xv, ax, keepdim),
            None => {
                let s: f64 = xv.data().iter().sum();
                let shape = if keepdim { vec![1; xv.ndim()] } else { vec![] };
                Tensor::new(shape, vec![s])?
            }
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x, axis }, rg, "sum")
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Mean, x, axis)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Permutation(axes.to_vec()));
        }
        let value = k::permute(self.value(x), axes);
        let rg = self.rg(&[x]);
        self.push(value, Op::Permute(x, axes.to_vec()), rg, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Rank { op: "transpose", expected: 2, got: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Slice { axis, start, len, size: shape[axis] });
        }
        let value = k::narrow(self.value(x), axis, start, len);
        let rg = self.rg(&[x]);
        self.push(value, Op::Narrow { x, axis, start }, rg, "narrow")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis { axis, rank: first.len() });
        }
        for &x in &xs[1..] {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::Broadcast { a: first.clone(), b: s.to_vec() });
            }
        }
        let parts: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let value = k::concat(&parts, axis);
        let rg = self.rg(xs);
        self.push(value, Op::Concat(xs.to_vec(), axis), rg, "concat")
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut local[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>, TensorError> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mul = |a: &Tensor, b: &Tensor| k::binary(a, b, |x, y| x * y);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, sum_to_shape(g, shp(*a))), (*b, sum_to_shape(g, shp(*b)))],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g, shp(*a))),
                (*b, k::unary(&sum_to_shape(g, shp(*b)), |v| -v)),
            ],
            Op::Mul(a, b) => vec![
                (*a, sum_to_shape(&mul(g, val(*b))?, shp(*a))),
                (*b, sum_to_shape(&mul(g, val(*a))?, shp(*b))),
            ],
            Op::Div(a, b) => {
                let ga = k::binary(g, val(*b), |x, y| x / y)?;
                let t = k::binary(g, y, |x, y| x * y)?;
                let gb = k::binary(&t, val(*b), |x, y| -x / y)?;
                vec![(*a, sum_to_shape(&ga, shp(*a))), (*b, sum_to_shape(&gb, shp(*b)))]
            }
            Op::Neg(x) => vec![(*x, k::unary(g, |v| -v))],
            Op::Exp(x) => vec![(*x, mul(g, y)?)],
            Op::Log(x) => vec![(*x, k::binary(g, val(*x), |a, b| a / b)?)],
            Op::Relu(x) => vec![(*x, k::binary(g, val(*x), |a, b| if b > 0.0 { a } else { 0.0 })?)],
            Op::Gelu(x) => vec![(*x, k::binary(g, val(*x), |a, b| a * gelu_grad(b))?)],
            Op::Softplus(x) => vec![(*x, k::binary(g, val(*x), |a, b| a * sigmoid(b))?)],
            Op::Sqrt(x) => vec![(*x, k::binary(g, y, |a, b| a * 0.5 / b)?)],
            Op::Powf(x, p) => {
                let p = *p;
                vec![(*x, k::binary(g, val(*x), |a, b| a * p * b.powf(p - 1.0))?)]
            }
            Op::Scale(x, s) => {
                let s = *s;
                vec![(*x, k::unary(g, |v| v * s))]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = sum_to_shape(&k::matmul(g, &k::transpose_last(bv))?, av.shape());
                let gb = if bv.ndim() == 2 && av.ndim() > 2 {
                    let kdim = av.shape()[av.ndim() - 1];
                    let n = bv.shape()[1];
                    let rows = av.numel() / kdim;
                    let a2 = av.reshape(&[rows, kdim])?;
                    let g2 = g.reshape(&[rows, n])?;
                    k::matmul(&k::transpose_last(&a2), &g2)?
                } else {
                    sum_to_shape(&k::matmul(&k::transpose_last(av), g)?, bv.shape())
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax(x, axis) => {
                let gy = mul(g, y)?;
                let s = k::expand_axis(&k::sum_axis(&gy, *axis, true), y.shape(), *axis);
                let d = k::binary(g, &s, |a, b| a - b)?;
                vec![(*x, mul(y, &d)?)]
            }
            Op::LogSoftmax(x, axis) => {
                let sm = k::unary(y, f64::exp);
                let s = k::expand_axis(&k::sum_axis(g, *axis, true), y.shape(), *axis);
                let t = mul(&sm, &s)?;
                vec![(*x, k::binary(g, &t, |a, b| a - b)?)]
            }
            Op::LogSumExp(x, axis) => {
                let xv = val(*x);
                let sm = k::softmax(xv, *axis);
                let ge = k::expand_axis(g, xv.shape(), *axis);
                vec![(*x, mul(&sm, &ge)?)]
            }
            Op::Sum { x, axis } => {
                let xs = shp(*x);
                let gx = match axis {
                    Some(ax) => k::expand_axis(g, xs, *ax),
                    None => Tensor::full(xs, g.data()[0]),
                };
                vec![(*x, gx)]
            }
            Op::Max { x, argmax } => {
                let mut gx = Tensor::zeros(shp(*x));
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(shp(*x))?)],
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(*x, k::permute(g, &inv))]
            }
            Op::Narrow { x, axis, start } => vec![(*x, k::unnarrow(g, shp(*x), *axis, *start))],
            Op::Concat(xs, axis) => {
                let mut start = 0;
                xs.iter()
                    .map(|&x| {
                        let len = shp(x)[*axis];
                        let part = k::narrow(g, *axis, start, len);
                        start += len;
                        (x, part)
                    })
                    .collect()
            }
        })
    }
}
