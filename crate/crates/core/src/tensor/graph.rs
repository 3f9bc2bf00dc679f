use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::ConvGeometry;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    LeakyRelu(f64),
    Abs,
    Sqrt,
    Square,
    /// `sign(0) = +1`. Has no backward rule.
    Sign,
    Clip(f64, f64),
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul | Self::Div => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Tanh => "tanh",
            Self::LeakyRelu(_) => "leaky_relu",
            Self::Abs => "abs",
            Self::Sqrt => "sqrt",
            Self::Square => "square",
            Self::Sign => "sign",
            Self::Clip(..) => "clip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    L1Norm,
    L2Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    LeakyRelu(f64),
    Abs,
    Sqrt,
    Square,
    Sign,
    Clip(f64, f64),
    SignSte(f64),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary {
        x: usize,
        f: Unary,
    },
    Binary {
        a: usize,
        b: usize,
        f: Binary,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeometry,
    },
    Reduce {
        x: usize,
        f: ReduceOp,
    },
    AxisBroadcast {
        x: usize,
        v: usize,
        axis: usize,
        mul: bool,
    },
    SumToAxis {
        x: usize,
        axis: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Pool {
        x: usize,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    SoftmaxXent {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Pact {
        x: usize,
        alpha: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// `(outer, channels, inner)` split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn channel_of(i: usize, channels: usize, inner: usize) -> usize {
    (i / inner) % channels
}

/// Tape of operations; one per forward/backward pass.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    checked: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: false,
            backward_done: false,
        }
    }

    /// Graph that validates finiteness and op domains on every node.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether `v` was recorded on this graph.
    pub fn owns(&self, v: Var) -> bool {
        self.idx(v).is_ok()
    }

    pub fn is_backpropagated(&self) -> bool {
        self.backward_done
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::c(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("var from another graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("var from another graph")].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.idx(v).ok()?;
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let i = self.idx(v).ok()?;
        self.grads.get_mut(i).and_then(|g| g.take())
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} input(s), got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.binary(Binary::Add, inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.binary(Binary::Sub, inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.binary(Binary::Mul, inputs[0], inputs[1]),
            ElementwiseOp::Div => self.binary(Binary::Div, inputs[0], inputs[1]),
            ElementwiseOp::Tanh => self.unary(Unary::Tanh, inputs[0]),
            ElementwiseOp::LeakyRelu(s) => self.unary(Unary::LeakyRelu(s), inputs[0]),
            ElementwiseOp::Abs => self.unary(Unary::Abs, inputs[0]),
            ElementwiseOp::Sqrt => self.unary(Unary::Sqrt, inputs[0]),
            ElementwiseOp::Square => self.unary(Unary::Square, inputs[0]),
            ElementwiseOp::Sign => self.unary(Unary::Sign, inputs[0]),
            ElementwiseOp::Clip(lo, hi) => {
                if lo > hi {
                    return Err(Error::InvalidArgument(format!("clip bounds {lo} > {hi}")));
                }
                self.unary(Unary::Clip(lo, hi), inputs[0])
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sign, x)
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::Clip(lo, hi), &[x])
    }

    /// `sign` forward with the clipped straight-through backward rule:
    /// gradient passes where `|x| ≤ threshold`.
    pub fn sign_ste(&mut self, x: Var, threshold: f64) -> Result<Var> {
        self.unary(Unary::SignSte(threshold), x)
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let input = &self.nodes[xi].value;
        let name = unary_name(f);
        if self.checked {
            if let Unary::Sqrt = f {
                if input.data().iter().any(|&v| v < T::zero()) {
                    return Err(Error::domain("sqrt", "negative input"));
                }
            }
        }
        let out = input.map(|v| unary_forward(f, v));
        let rg = self.rg(xi);
        self.push(out, Op::Unary { x: xi, f }, rg, name)
    }

    fn binary(&mut self, f: Binary, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let name = binary_name(f);
        let shape = if av.shape() == bv.shape() || bv.len() == 1 {
            av.shape().to_vec()
        } else if av.len() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bt = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if self.checked {
            if let Binary::Div = f {
                if bd.iter().any(|v| v.is_zero()) {
                    return Err(Error::domain("div", "division by zero"));
                }
            }
        }
        let data = (0..n)
            .map(|i| {
                let (x, y) = (at(i), bt(i));
                match f {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        self.push(
            Tensor::new(shape, data)?,
            Op::Binary { a: ai, b: bi, f },
            rg,
            name,
        )
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let rg = self.rg(ai) || self.rg(bi);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a: ai, b: bi, m, k, n },
            rg,
            "matmul",
        )
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[k, k, C, F]` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let geom = ConvGeometry::new(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            stride,
            pad,
        )?;
        let out = geom.forward(self.nodes[xi].value.data(), self.nodes[wi].value.data());
        let rg = self.rg(xi) || self.rg(wi);
        self.push(
            Tensor::new(geom.output_shape(), out)?,
            Op::Conv { x: xi, w: wi, geom },
            rg,
            "conv2d",
        )
    }

    // ---- reductions and shape ops --------------------------------------

    pub fn reduce(&mut self, f: ReduceOp, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let d = self.nodes[xi].value.data();
        if d.is_empty() {
            return Err(Error::EmptyInput { op: "reduce" });
        }
        // accumulate in f64 so f32 reductions keep full precision
        let acc = |h: fn(f64) -> f64| d.iter().map(|v| h(v.f64())).sum::<f64>();
        let v = T::c(match f {
            ReduceOp::Sum => acc(|v| v),
            ReduceOp::Mean => acc(|v| v) / d.len() as f64,
            ReduceOp::L1Norm => acc(f64::abs),
            ReduceOp::L2Norm => acc(|v| v * v).sqrt(),
        });
        let rg = self.rg(xi);
        self.push(Tensor::scalar(v), Op::Reduce { x: xi, f }, rg, "reduce")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x)
    }

    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::L1Norm, x)
    }

    /// Backward at the zero vector yields the zero subgradient.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::L2Norm, x)
    }

    fn axis_broadcast(&mut self, x: Var, v: Var, axis: usize, mul: bool) -> Result<Var> {
        let (xi, vi) = (self.idx(x)?, self.idx(v)?);
        let (xv, vv) = (&self.nodes[xi].value, &self.nodes[vi].value);
        let op = if mul { "broadcast_mul" } else { "broadcast_add" };
        if axis >= xv.rank() || vv.len() != xv.shape()[axis] {
            return Err(Error::shape(op, xv.shape(), vv.shape()));
        }
        let (_, c, inner) = axis_split(xv.shape(), axis);
        let vd = vv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let s = vd[channel_of(i, c, inner)];
                if mul {
                    e * s
                } else {
                    e + s
                }
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(xi) || self.rg(vi);
        self.push(out, Op::AxisBroadcast { x: xi, v: vi, axis, mul }, rg, op)
    }

    /// `x + v` with `v` (length `shape[axis]`) broadcast along `axis`.
    pub fn broadcast_add(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.axis_broadcast(x, v, axis, false)
    }

    /// `x ⊙ v` with `v` (length `shape[axis]`) broadcast along `axis`.
    pub fn broadcast_mul(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.axis_broadcast(x, v, axis, true)
    }

    /// Sums over every axis except `axis`, producing a vector.
    pub fn sum_to_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if axis >= xv.rank() {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
        }
        let (_, c, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![T::zero(); c];
        for (i, &e) in xv.data().iter().enumerate() {
            out[channel_of(i, c, inner)] = out[channel_of(i, c, inner)] + e;
        }
        let rg = self.rg(xi);
        self.push(Tensor::new(vec![c], out)?, Op::SumToAxis { x: xi, axis }, rg, "sum_to_axis")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        let rg = self.rg(xi);
        self.push(out, Op::Reshape { x: xi }, rg, "reshape")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 {
            return Err(Error::InvalidArgument("transpose needs a rank-2 tensor".into()));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let out = transpose_buf(xv.data(), rows, cols);
        let rg = self.rg(xi);
        self.push(
            Tensor::new(vec![cols, rows], out)?,
            Op::Transpose { x: xi, rows, cols },
            rg,
            "transpose",
        )
    }

    // ---- network primitives ------------------------------------------

    /// Batch normalization over every axis except `axis`, using the batch
    /// statistics. Returns the output and the statistics used.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
        }
        let (outer, c, inner) = axis_split(&shape, axis);
        let count = outer * inner;
        if count < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm: training mode needs at least 2 values per channel".into(),
            ));
        }
        let d = self.nodes[xi].value.data();
        let mut mean = vec![T::zero(); c];
        for (i, &e) in d.iter().enumerate() {
            let ch = channel_of(i, c, inner);
            mean[ch] = mean[ch] + e;
        }
        let n = T::c(count as f64);
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for (i, &e) in d.iter().enumerate() {
            let ch = channel_of(i, c, inner);
            let dev = e - mean[ch];
            var[ch] = var[ch] + dev * dev;
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let out = self.batch_norm_impl(x, gamma, beta, axis, eps, &mean, &var, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        self.batch_norm_impl(x, gamma, beta, axis, eps, mean, var, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        mean: &[T],
        var: &[T],
        train: bool,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[xi].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
        }
        let (_, c, inner) = axis_split(&shape, axis);
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if gv.len() != c || bv.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", &shape, gv.shape()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(eps)).sqrt()).collect();
        let d = self.nodes[xi].value.data();
        let mut xhat = Vec::with_capacity(d.len());
        let mut out = Vec::with_capacity(d.len());
        for (i, &e) in d.iter().enumerate() {
            let ch = channel_of(i, c, inner);
            let h = (e - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gv.data()[ch] * h + bv.data()[ch]);
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                axis,
                xhat,
                inv_std,
                train,
            },
            rg,
            "batch_norm",
        )
    }

    /// 2×2 pooling with stride 2 on `[N, C, H, W]`; H and W must be even.
    /// Max pooling routes the gradient to the first maximal element.
    pub fn pool2x2(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "pool2x2 needs [N, C, even H, even W], got {s:?}"
            )));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::new();
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let idx = [
                        base + 2 * y * w + 2 * xx,
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    match kind {
                        PoolKind::Max => {
                            let mut best = idx[0];
                            for &i in &idx[1..] {
                                if d[i] > d[best] {
                                    best = i;
                                }
                            }
                            argmax.push(best);
                            out.push(d[best]);
                        }
                        PoolKind::Avg => {
                            out.push(idx.iter().map(|&i| d[i]).sum::<T>() * T::c(0.25));
                        }
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        let rg = self.rg(xi);
        self.push(
            Tensor::new(shape, out)?,
            Op::Pool { x: xi, kind, argmax },
            rg,
            "pool2x2",
        )
    }

    /// Mean cross-entropy of softmax(`logits`) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} ≥ class count {c}")));
        }
        let d = lv.data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &d[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - mx).exp() / z;
            }
            loss = loss - (row[labels[r]] - mx - z.ln());
        }
        loss = loss / T::c(b as f64);
        let rg = self.rg(li);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: li,
                probs,
                labels: labels.to_vec(),
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// PACT activation quantizer: clip to `[0, α]` and round to `2^bits`
    /// uniform levels (half away from zero). Round is straight-through; the
    /// gradient w.r.t. α collects upstream gradient where `x ≥ α`.
    pub fn pact(&mut self, x: Var, alpha: Var, bits: u32) -> Result<Var> {
        let (xi, ai) = (self.idx(x)?, self.idx(alpha)?);
        if bits == 0 {
            return Err(Error::InvalidArgument("pact: bits must be ≥ 1".into()));
        }
        let a = &self.nodes[ai].value;
        if a.len() != 1 {
            return Err(Error::shape("pact", self.nodes[xi].value.shape(), a.shape()));
        }
        let alpha_v = a.item();
        if alpha_v <= T::zero() {
            return Err(Error::domain("pact", "clip level α must be positive"));
        }
        let levels = ((1u64 << bits.min(52)) - 1) as f64;
        let step = alpha_v / T::c(levels);
        let out = self.nodes[xi].value.map(|v| {
            let clipped = v.max(T::zero()).min(alpha_v);
            let k = (clipped / step).round();
            if k >= T::c(levels) {
                alpha_v
            } else {
                k * step
            }
        });
        let rg = self.rg(xi) || self.rg(ai);
        self.push(out, Op::Pact { x: xi, alpha: ai }, rg, "pact")
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`. Gradients accumulate into
    /// every node that (transitively) depends on a `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ri = self.idx(root)?;
        if self.backward_done {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.nodes[ri].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[ri].value.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[ri].requires_grad {
            return Ok(());
        }
        self.grads[ri] = Some(Tensor::ones(self.nodes[ri].value.shape().to_vec()));
        for i in (0..=ri).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.checked && !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: Vec<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut self.grads[target] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => {
                let shape = self.nodes[target].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let gd = g.data();
        let mut pending: Vec<(usize, Vec<T>)> = Vec::with_capacity(3);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, f } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    if let Unary::Sign = f {
                        return Err(Error::NonDifferentiable("sign"));
                    }
                    let (xd, yd) = (self.nodes[x].value.data(), node.value.data());
                    let grad = gd
                        .iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(&g, (&xv, &yv))| g * unary_derivative(*f, xv, yv))
                        .collect();
                    pending.push((x, grad));
                }
            }
            Op::Binary { a, b, f } => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let at = |k: usize| if ad.len() == 1 { ad[0] } else { ad[k] };
                let bt = |k: usize| if bd.len() == 1 { bd[0] } else { bd[k] };
                let n = gd.len();
                let local = |k: usize| -> (T, T) {
                    match f {
                        Binary::Add => (T::one(), T::one()),
                        Binary::Sub => (T::one(), -T::one()),
                        Binary::Mul => (bt(k), at(k)),
                        Binary::Div => (T::one() / bt(k), -at(k) / (bt(k) * bt(k))),
                    }
                };
                let reduce_if = |v: Vec<T>, len: usize| {
                    if len == 1 && n != 1 {
                        vec![v.into_iter().sum()]
                    } else {
                        v
                    }
                };
                if self.nodes[a].requires_grad {
                    let v = (0..n).map(|k| gd[k] * local(k).0).collect();
                    pending.push((a, reduce_if(v, ad.len())));
                }
                if self.nodes[b].requires_grad {
                    let v = (0..n).map(|k| gd[k] * local(k).1).collect();
                    pending.push((b, reduce_if(v, bd.len())));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, self.nodes[b].value.data(), true, T::zero(), &mut ga);
                    pending.push((a, ga));
                }
                if self.nodes[b].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.nodes[a].value.data(), true, gd, false, T::zero(), &mut gb);
                    pending.push((b, gb));
                }
            }
            Op::Conv { x, w, geom } => {
                let (x, w) = (*x, *w);
                let (gx, gw) = geom.backward(
                    self.nodes[x].value.data(),
                    self.nodes[w].value.data(),
                    gd,
                    self.nodes[x].requires_grad,
                    self.nodes[w].requires_grad,
                );
                if let Some(gx) = gx {
                    pending.push((x, gx));
                }
                if let Some(gw) = gw {
                    pending.push((w, gw));
                }
            }
            Op::Reduce { x, f } => {
                let x = *x;
                let g0 = gd[0];
                let xd = self.nodes[x].value.data();
                let grad: Vec<T> = match f {
                    ReduceOp::Sum => vec![g0; xd.len()],
                    ReduceOp::Mean => vec![g0 / T::c(xd.len() as f64); xd.len()],
                    ReduceOp::L1Norm => xd.iter().map(|&v| g0 * sign_or_zero(v)).collect(),
                    ReduceOp::L2Norm => {
                        let norm = node.value.item();
                        if norm.is_zero() {
                            vec![T::zero(); xd.len()]
                        } else {
                            xd.iter().map(|&v| g0 * v / norm).collect()
                        }
                    }
                };
                pending.push((x, grad));
            }
            Op::AxisBroadcast { x, v, axis, mul } => {
                let (x, v, axis, mul) = (*x, *v, *axis, *mul);
                let xv = &self.nodes[x].value;
                let (_, c, inner) = axis_split(xv.shape(), axis);
                let vd = self.nodes[v].value.data();
                if self.nodes[x].requires_grad {
                    let grad = if mul {
                        gd.iter()
                            .enumerate()
                            .map(|(k, &g)| g * vd[channel_of(k, c, inner)])
                            .collect()
                    } else {
                        gd.to_vec()
                    };
                    pending.push((x, grad));
                }
                if self.nodes[v].requires_grad {
                    let mut gv = vec![T::zero(); c];
                    for (k, &g) in gd.iter().enumerate() {
                        let ch = channel_of(k, c, inner);
                        gv[ch] = gv[ch] + if mul { g * xv.data()[k] } else { g };
                    }
                    pending.push((v, gv));
                }
            }
            Op::SumToAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let xv = &self.nodes[x].value;
                let (_, c, inner) = axis_split(xv.shape(), axis);
                let grad = (0..xv.len()).map(|k| gd[channel_of(k, c, inner)]).collect();
                pending.push((x, grad));
            }
            Op::Reshape { x } => pending.push((*x, gd.to_vec())),
            Op::Transpose { x, rows, cols } => {
                // g is [cols, rows]
                pending.push((*x, transpose_buf(gd, *cols, *rows)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                train,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let shape = self.nodes[x].value.shape();
                let (outer, c, inner) = axis_split(shape, *axis);
                let count = T::c((outer * inner) as f64);
                let gam = self.nodes[gamma].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (k, &g) in gd.iter().enumerate() {
                    let ch = channel_of(k, c, inner);
                    sum_g[ch] = sum_g[ch] + g;
                    sum_gx[ch] = sum_gx[ch] + g * xhat[k];
                }
                if self.nodes[x].requires_grad {
                    let grad = gd
                        .iter()
                        .enumerate()
                        .map(|(k, &g)| {
                            let ch = channel_of(k, c, inner);
                            let scale = gam[ch] * inv_std[ch];
                            if *train {
                                scale * (g - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                            } else {
                                scale * g
                            }
                        })
                        .collect();
                    pending.push((x, grad));
                }
                if self.nodes[gamma].requires_grad {
                    pending.push((gamma, sum_gx));
                }
                if self.nodes[beta].requires_grad {
                    pending.push((beta, sum_g));
                }
            }
            Op::Pool { x, kind, argmax } => {
                let x = *x;
                let xv = &self.nodes[x].value;
                let mut grad = vec![T::zero(); xv.len()];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            grad[src] = grad[src] + gd[o];
                        }
                    }
                    PoolKind::Avg => {
                        let s = xv.shape();
                        let (h, w) = (s[2], s[3]);
                        let (oh, ow) = (h / 2, w / 2);
                        for (o, &g) in gd.iter().enumerate() {
                            let p = o / (oh * ow);
                            let (y, xx) = ((o % (oh * ow)) / ow, o % ow);
                            let base = p * h * w;
                            let q = g * T::c(0.25);
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let k = base + (2 * y + dy) * w + 2 * xx + dx;
                                grad[k] = grad[k] + q;
                            }
                        }
                    }
                }
                pending.push((x, grad));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gd[0] / T::c(b as f64);
                let mut grad: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    grad[r * c + l] = grad[r * c + l] - scale;
                }
                pending.push((*logits, grad));
            }
            Op::Pact { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let a = self.nodes[alpha].value.item();
                let xd = self.nodes[x].value.data();
                if self.nodes[x].requires_grad {
                    let grad = gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() && v < a { g } else { T::zero() })
                        .collect();
                    pending.push((x, grad));
                }
                if self.nodes[alpha].requires_grad {
                    let ga = gd
                        .iter()
                        .zip(xd)
                        .filter(|(_, &v)| v >= a)
                        .map(|(&g, _)| g)
                        .sum();
                    pending.push((alpha, vec![ga]));
                }
            }
        }
        for (target, contribution) in pending {
            self.accumulate(target, contribution);
        }
        Ok(())
    }
}

fn transpose_buf<T: Copy>(d: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(d.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(d[r * cols + c]);
        }
    }
    out
}

#[inline]
fn sign_or_zero<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn sign_pos_zero<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

fn unary_name(f: Unary) -> &'static str {
    match f {
        Unary::Tanh => "tanh",
        Unary::LeakyRelu(_) => "leaky_relu",
        Unary::Abs => "abs",
        Unary::Sqrt => "sqrt",
        Unary::Square => "square",
        Unary::Sign => "sign",
        Unary::Clip(..) => "clip",
        Unary::SignSte(_) => "sign_ste",
    }
}

fn binary_name(f: Binary) -> &'static str {
    match f {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

#[inline]
fn unary_forward<T: Scalar>(f: Unary, v: T) -> T {
    match f {
        Unary::Tanh => v.tanh(),
        Unary::LeakyRelu(s) => {
            if v > T::zero() {
                v
            } else {
                v * T::c(s)
            }
        }
        Unary::Abs => v.abs(),
        Unary::Sqrt => v.sqrt(),
        Unary::Square => v * v,
        Unary::Sign | Unary::SignSte(_) => sign_pos_zero(v),
        Unary::Clip(lo, hi) => v.max(T::c(lo)).min(T::c(hi)),
    }
}

#[inline]
fn unary_derivative<T: Scalar>(f: Unary, x: T, y: T) -> T {
    match f {
        Unary::Tanh => T::one() - y * y,
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                T::c(s)
            }
        }
        Unary::Abs => sign_or_zero(x),
        Unary::Sqrt => T::c(0.5) / y,
        Unary::Square => T::c(2.0) * x,
        Unary::Sign => T::zero(),
        Unary::Clip(lo, hi) => {
            if x >= T::c(lo) && x <= T::c(hi) {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::SignSte(t) => {
            if x.abs() <= T::c(t) {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}
