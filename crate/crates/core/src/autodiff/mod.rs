//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, which is automatically a topological order. A single
//! reverse sweep from a scalar loss yields gradients for every leaf created
//! with [`Tape::param`].

mod gradcheck;
pub(crate) mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use gradcheck::{central_difference, grad_check, grad_check_sampled, GradCheckReport};
use kernels::{axis_split, ConvGeom, Lerp};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { x: usize, scale: f64 },
    ScaleBy { x: usize, s: usize },
    Sigmoid(usize),
    Tanh(usize),
    LnClamped { x: usize, eps: f64 },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    ChannelBias { x: usize, b: usize },
    ChannelScale { x: usize, g: usize },
    GlobalAvgPool(usize),
    Upsample { x: usize, ys: Vec<Lerp>, xs: Vec<Lerp> },
    L2Normalize { x: usize, axis: usize, eps: f64 },
    Concat(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Select { x: usize, axis: usize, index: usize },
    Custom { x: usize, backward: CustomBackward },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one differentiable computation. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward sweep, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(value, op, rg)
    }

    /// Concatenates rank-3 `[C_k, H, W]` maps along the channel axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
        let base = first.shape();
        if base.is_empty() {
            return shape_err("concat needs rank >= 1");
        }
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::TapeMismatch);
            }
            let s = p.shape();
            if s.len() != base.len() || s[1..] != base[1..] {
                return shape_err(format!("concat {s:?} with {base:?}"));
            }
            channels += s[0];
            data.extend_from_slice(p.value().data());
        }
        let mut shape = base.clone();
        shape[0] = channels;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(Tensor::from_raw(shape, data), Op::Concat(ids.clone()), &ids))
    }

    /// Registers a unary op with a caller-supplied backward rule
    /// `(input, output, grad_output) -> grad_input`.
    pub fn custom_unary<'t>(
        &'t self,
        x: Var<'t>,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Result<Var<'t>> {
        let out = forward(&x.value());
        Ok(self.record(out, Op::Custom { x: x.id, backward: Box::new(backward) }, &[x.id]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::TapeMismatch);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_raw(root.value.shape().to_vec(), vec![1.0]));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.by_id.insert(id, g);
                continue;
            }
            for (input, gi) in local_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.accumulate(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

fn same_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(like.numel(), data.len());
    Tensor::from_raw(like.shape().to_vec(), data)
}

/// Vector-Jacobian products of one node with respect to each of its inputs.
fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let y = &*node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            vec![
                (*a, g.zip_map(bv, |g, b| g * b).unwrap()),
                (*b, g.zip_map(av, |g, a| g * a).unwrap()),
            ]
        }
        Op::Div(a, b) => {
            let bv = val(nodes, *b);
            let ga = g.zip_map(bv, |g, b| g / b).unwrap();
            let gb = ga.zip_map(y, |ga, y| -ga * y).unwrap();
            vec![(*a, ga), (*b, gb)]
        }
        Op::Affine { x, scale } => vec![(*x, g.map(|v| v * scale))],
        Op::ScaleBy { x, s } => {
            let xv = val(nodes, *x);
            let sv = val(nodes, *s).item();
            let gs: f64 = g.data().iter().zip(xv.data()).map(|(g, x)| g * x).sum();
            vec![
                (*x, g.map(|v| v * sv)),
                (*s, Tensor::from_raw(val(nodes, *s).shape().to_vec(), vec![gs])),
            ]
        }
        Op::Sigmoid(x) => vec![(*x, g.zip_map(y, |g, y| g * y * (1.0 - y)).unwrap())],
        Op::Tanh(x) => vec![(*x, g.zip_map(y, |g, y| g * (1.0 - y * y)).unwrap())],
        Op::LnClamped { x, eps } => {
            let eps = *eps;
            let gx = g.zip_map(val(nodes, *x), |g, x| if x > eps { g / x } else { 0.0 }).unwrap();
            vec![(*x, gx)]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let ga = kernels::matmul_nt(g.data(), bv.data(), m, n, k);
            let gb = kernels::matmul_tn(av.data(), g.data(), m, k, n);
            vec![(*a, same_shape(av, ga)), (*b, same_shape(bv, gb))]
        }
        Op::Transpose(x) => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let xv = val(nodes, *x);
            vec![(*x, Tensor::from_raw(xv.shape().to_vec(), kernels::transpose(g.data(), r, c)))]
        }
        Op::Reshape(x) => {
            let xv = val(nodes, *x);
            vec![(*x, Tensor::from_raw(xv.shape().to_vec(), g.data().to_vec()))]
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(y.shape(), *axis);
            let mut gx = vec![0.0; y.numel()];
            let (yd, gd) = (y.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![(*x, same_shape(y, gx))]
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = axis_split(y.shape(), *axis);
            let mut gx = vec![0.0; y.numel()];
            let (yd, gd) = (y.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let total: f64 = (0..len).map(|k| gd[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = gd[at(k)] - yd[at(k)].exp() * total;
                    }
                }
            }
            vec![(*x, same_shape(y, gx))]
        }
        Op::Conv2d { x, k, geom } => {
            let (xv, kv) = (val(nodes, *x), val(nodes, *k));
            let (gx, gk) = kernels::conv2d_backward(xv.data(), kv.data(), g.data(), *geom);
            vec![
                (*x, Tensor::from_raw(xv.shape().to_vec(), gx)),
                (*k, Tensor::from_raw(kv.shape().to_vec(), gk)),
            ]
        }
        Op::ChannelBias { x, b } => {
            let c = y.shape()[0];
            let plane = y.numel() / c;
            let gb = (0..c).map(|ch| g.data()[ch * plane..(ch + 1) * plane].iter().sum()).collect();
            vec![(*x, g.clone()), (*b, Tensor::from_raw(vec![c], gb))]
        }
        Op::ChannelScale { x, g: gate } => {
            let (xv, gv) = (val(nodes, *x), val(nodes, *gate));
            let c = xv.shape()[0];
            let plane = xv.numel() / c;
            let mut gx = vec![0.0; xv.numel()];
            let mut gg = vec![0.0; c];
            for ch in 0..c {
                let s = ch * plane..(ch + 1) * plane;
                for ((o, &gy), &xx) in gx[s.clone()].iter_mut().zip(&g.data()[s.clone()]).zip(&xv.data()[s]) {
                    *o = gy * gv.data()[ch];
                    gg[ch] += gy * xx;
                }
            }
            vec![
                (*x, Tensor::from_raw(xv.shape().to_vec(), gx)),
                (*gate, Tensor::from_raw(gv.shape().to_vec(), gg)),
            ]
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(nodes, *x);
            let c = xv.shape()[0];
            let plane = xv.numel() / c;
            let mut gx = Vec::with_capacity(xv.numel());
            for ch in 0..c {
                let v = g.data()[ch] / plane as f64;
                gx.extend(std::iter::repeat_n(v, plane));
            }
            vec![(*x, Tensor::from_raw(xv.shape().to_vec(), gx))]
        }
        Op::Upsample { x, ys, xs } => {
            let xv = val(nodes, *x);
            let s = xv.shape();
            let gx = kernels::bilinear_backward(g.data(), s[0], s[1], s[2], ys, xs);
            vec![(*x, Tensor::from_raw(s.to_vec(), gx))]
        }
        Op::L2Normalize { x, axis, eps } => {
            let xv = val(nodes, *x);
            let (outer, len, inner) = axis_split(xv.shape(), *axis);
            let (xd, yd, gd) = (xv.data(), y.data(), g.data());
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let norm = (0..len).map(|k| xd[at(k)] * xd[at(k)]).sum::<f64>().sqrt();
                    if norm >= *eps {
                        let dot: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = (gd[at(k)] - yd[at(k)] * dot) / norm;
                        }
                    } else {
                        for k in 0..len {
                            gx[at(k)] = gd[at(k)] / eps;
                        }
                    }
                }
            }
            vec![(*x, Tensor::from_raw(xv.shape().to_vec(), gx))]
        }
        Op::Concat(ids) => {
            let mut offset = 0;
            ids.iter()
                .map(|&id| {
                    let part = val(nodes, id);
                    let n = part.numel();
                    let gi = Tensor::from_raw(part.shape().to_vec(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                    (id, gi)
                })
                .collect()
        }
        Op::Sum(x) => {
            let xv = val(nodes, *x);
            vec![(*x, Tensor::full(xv.shape(), g.item()))]
        }
        Op::Mean(x) => {
            let xv = val(nodes, *x);
            vec![(*x, Tensor::full(xv.shape(), g.item() / xv.numel() as f64))]
        }
        Op::Select { x, axis, index } => {
            let xv = val(nodes, *x);
            let (outer, len, inner) = axis_split(xv.shape(), *axis);
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    gx[o * len * inner + index * inner + i] = g.data()[o * inner + i];
                }
            }
            vec![(*x, Tensor::from_raw(xv.shape().to_vec(), gx))]
        }
        Op::Custom { x, backward } => vec![(*x, backward(val(nodes, *x), y, g))],
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = self.value().zip_map(&other.value(), f)?;
        Ok(self.tape.record(out, op, &[self.id, other.id]))
    }

    fn unary(&self, out: Tensor, op: Op) -> Var<'t> {
        self.tape.record(out, op, &[self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// `scale * x + shift`
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let out = self.value().map(|v| scale * v + shift);
        self.unary(out, Op::Affine { x: self.id, scale })
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Multiplies every element by a scalar (single-element) variable.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let sv = s.value();
        if sv.numel() != 1 {
            return shape_err(format!("scale_by expects a scalar, got {:?}", sv.shape()));
        }
        let k = sv.item();
        let out = self.value().map(|v| v * k);
        Ok(self.tape.record(out, Op::ScaleBy { x: self.id, s: s.id }, &[self.id, s.id]))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(out, Op::Tanh(self.id))
    }

    /// `ln(max(x, eps))`, with zero gradient where the clamp is active.
    pub fn ln_clamped(&self, eps: f64) -> Var<'t> {
        let out = self.value().map(|v| v.max(eps).ln());
        self.unary(out, Op::LnClamped { x: self.id, eps })
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::from_raw(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return shape_err(format!("transpose expects rank 2, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out = Tensor::from_raw(vec![c, r], kernels::transpose(x.data(), r, c));
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    fn check_axis(&self, axis: usize) -> Result<Rc<Tensor>> {
        let x = self.value();
        if axis >= x.rank() {
            return shape_err(format!("axis {axis} out of range for {:?}", x.shape()));
        }
        Ok(x)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.check_axis(axis)?;
        let (o, l, i) = axis_split(x.shape(), axis);
        let out = Tensor::from_raw(x.shape().to_vec(), kernels::softmax(x.data(), o, l, i));
        Ok(self.unary(out, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.check_axis(axis)?;
        let (o, l, i) = axis_split(x.shape(), axis);
        let out = Tensor::from_raw(x.shape().to_vec(), kernels::log_softmax(x.data(), o, l, i));
        Ok(self.unary(out, Op::LogSoftmax { x: self.id, axis }))
    }

    /// "Same"-padded cross-correlation of a `[C_in,H,W]` map with a
    /// `[C_out,C_in,kh,kw]` kernel, or `[C,1,kh,kw]` when `depthwise`.
    pub fn conv2d(&self, kernel: Var<'t>, depthwise: bool) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let (x, k) = (self.value(), kernel.value());
        if x.rank() != 3 || k.rank() != 4 {
            return shape_err(format!("conv2d input {:?} kernel {:?}", x.shape(), k.shape()));
        }
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k_in, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel extent {kh}x{kw} must be odd")));
        }
        if depthwise {
            if c_out != c_in || k_in != 1 {
                return shape_err(format!(
                    "depthwise kernel {:?} does not fit {c_in} input channels",
                    k.shape()
                ));
            }
        } else if k_in != c_in {
            return shape_err(format!("kernel {:?} expects {k_in} channels, input has {c_in}", k.shape()));
        }
        let geom = ConvGeom { c_in, c_out, h, w, kh, kw, depthwise };
        let out = Tensor::from_raw(vec![c_out, h, w], kernels::conv2d(x.data(), k.data(), geom));
        Ok(self.tape.record(out, Op::Conv2d { x: self.id, k: kernel.id, geom }, &[self.id, kernel.id]))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (x, b) = (self.value(), bias.value());
        if x.rank() < 1 || b.shape() != [x.shape()[0]] {
            return shape_err(format!("bias {:?} for input {:?}", b.shape(), x.shape()));
        }
        let plane = x.numel() / x.shape()[0];
        let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i / plane]).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        Ok(self.tape.record(out, Op::ChannelBias { x: self.id, b: bias.id }, &[self.id, bias.id]))
    }

    /// Multiplies channel `c` of a `[C,...]` map by `gate[c]`.
    pub fn channel_scale(&self, gate: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gate)?;
        let (x, g) = (self.value(), gate.value());
        if x.rank() < 1 || g.shape() != [x.shape()[0]] {
            return shape_err(format!("gate {:?} for input {:?}", g.shape(), x.shape()));
        }
        let plane = x.numel() / x.shape()[0];
        let data = x.data().iter().enumerate().map(|(i, v)| v * g.data()[i / plane]).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        Ok(self.tape.record(out, Op::ChannelScale { x: self.id, g: gate.id }, &[self.id, gate.id]))
    }

    /// `[C,H,W] -> [C]` per-channel mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 {
            return shape_err(format!("global_avg_pool expects rank 3, got {:?}", x.shape()));
        }
        let c = x.shape()[0];
        let plane = x.numel() / c;
        let data = (0..c)
            .map(|ch| x.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.unary(Tensor::from_raw(vec![c], data), Op::GlobalAvgPool(self.id)))
    }

    /// Half-pixel-centre bilinear resize of a `[C,h,w]` map to `[C,H,W]`.
    pub fn bilinear_upsample(&self, height: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 {
            return shape_err(format!("bilinear_upsample expects rank 3, got {:?}", x.shape()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("target extent must be positive".into()));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if height < h || width < w {
            return Err(Error::InvalidArgument(format!(
                "cannot upsample {h}x{w} to smaller {height}x{width}"
            )));
        }
        let ys = kernels::lerp_table(h, height);
        let xs = kernels::lerp_table(w, width);
        let out = Tensor::from_raw(vec![c, height, width], kernels::bilinear(x.data(), c, h, w, &ys, &xs));
        Ok(self.unary(out, Op::Upsample { x: self.id, ys, xs }))
    }

    /// Divides each slice along `axis` by `max(||slice||_2, eps)`.
    pub fn l2_normalize(&self, axis: usize, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        let x = self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let norm = (0..len).map(|k| xd[at(k)] * xd[at(k)]).sum::<f64>().sqrt();
                let d = norm.max(eps);
                for k in 0..len {
                    out[at(k)] = xd[at(k)] / d;
                }
            }
        }
        let out = Tensor::from_raw(x.shape().to_vec(), out);
        Ok(self.unary(out, Op::L2Normalize { x: self.id, axis, eps }))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.sum() / x.numel() as f64);
        self.unary(out, Op::Mean(self.id))
    }

    /// Drops `axis` by taking slice `index` along it.
    pub fn select(&self, axis: usize, index: usize) -> Result<Var<'t>> {
        let x = self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        if index >= len {
            return shape_err(format!("index {index} out of range for axis of length {len}"));
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * len * inner + index * inner..o * len * inner + (index + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::from_raw(shape, data), Op::Select { x: self.id, axis, index }))
    }

    /// `[C,H,W] -> [H*W, C]`: one row per spatial position.
    pub fn to_patches(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return shape_err(format!("to_patches expects rank 3, got {s:?}"));
        }
        self.reshape(&[s[0], s[1] * s[2]])?.transpose()
    }

    /// `[H*W, C] -> [C,H,W]`
    pub fn from_patches(&self, height: usize, width: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != height * width {
            return shape_err(format!("cannot fold {s:?} into {height}x{width}"));
        }
        self.transpose()?.reshape(&[s[1], height, width])
    }
}
