use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MulScalar,
    Sum,
    SumSq,
    Reshape,
    MatMul,
    Transpose,
    Conv2d,
    ConvBwdInput,
    ConvBwdWeight,
    AvgPool2,
    AvgPool2Bwd,
    Relu,
    ReluMask,
    BroadcastAxis1,
    SumAxis1,
    Slice { offset: usize },
    Embed { offset: usize, len: usize },
    Softmax,
    LogSoftmax,
    RowSumBroadcast,
    SoftmaxCe,
    PlaneMeanBroadcast,
    AddPow { c: f64, p: f64 },
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MulScalar => "mul_scalar",
            Op::Sum => "sum",
            Op::SumSq => "sum_sq",
            Op::Reshape => "reshape",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d => "conv2d",
            Op::ConvBwdInput => "conv2d_bwd_input",
            Op::ConvBwdWeight => "conv2d_bwd_weight",
            Op::AvgPool2 => "avgpool2",
            Op::AvgPool2Bwd => "avgpool2_bwd",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::BroadcastAxis1 => "broadcast_axis1",
            Op::SumAxis1 => "sum_axis1",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::RowSumBroadcast => "row_sum_broadcast",
            Op::SoftmaxCe => "softmax_cross_entropy",
            Op::PlaneMeanBroadcast => "plane_mean_broadcast",
            Op::AddPow { .. } => "add_pow",
        }
    }
}

struct Node<E> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<E>,
}

/// Recording context. Nodes are appended in evaluation order and never
/// removed, so every node's operands precede it.
///
/// A graph is single-threaded (`Rc`); independent graphs may live on
/// different threads.
pub struct Graph<E: Element = f32> {
    nodes: Rc<RefCell<Vec<Node<E>>>>,
}

impl<E: Element> Clone for Graph<E> {
    fn clone(&self) -> Self {
        Self { nodes: Rc::clone(&self.nodes) }
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    /// Records an input tensor. Any node can later be used as a
    /// differentiation leaf, so there is no separate "variable" kind.
    pub fn leaf(&self, value: Tensor<E>) -> Result<Var<E>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.record(Op::Leaf, vec![], value))
    }

    pub fn scalar(&self, v: E) -> Result<Var<E>> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph<E>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn record(&self, op: Op, inputs: Vec<usize>, value: Tensor<E>) -> Var<E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        Var { graph: self.clone(), id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }
}

/// Handle to one recorded node.
pub struct Var<E: Element = f32> {
    graph: Graph<E>,
    id: usize,
}

impl<E: Element> Clone for Var<E> {
    fn clone(&self) -> Self {
        Self { graph: self.graph.clone(), id: self.id }
    }
}

impl<E: Element> std::fmt::Debug for Var<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<E: Element> Var<E> {
    pub fn value(&self) -> Tensor<E> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &Graph<E> {
        &self.graph
    }

    /// Scalar value as f64 (first element for non-scalars).
    pub fn item(&self) -> f64 {
        self.value().item().as_f64()
    }

    fn push(&self, op: Op, others: &[&Var<E>], shape: Vec<usize>, data: Vec<E>) -> Result<Var<E>> {
        for o in others {
            if !self.graph.same(&o.graph) {
                return Err(TensorError::GraphMismatch);
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut inputs = vec![self.id];
        inputs.extend(others.iter().map(|o| o.id));
        Ok(self.graph.record(op, inputs, Tensor::from_parts(shape, data)))
    }

    fn binary_same(&self, other: &Var<E>, op: Op, f: impl Fn(E, E) -> E) -> Result<Var<E>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(op.name(), &[a.shape(), b.shape()]));
        }
        self.push(op, &[other], a.shape().to_vec(), zip_map(a.data(), b.data(), f))
    }

    pub fn add(&self, other: &Var<E>) -> Result<Var<E>> {
        self.binary_same(other, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<E>) -> Result<Var<E>> {
        self.binary_same(other, Op::Sub, |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Var<E>) -> Result<Var<E>> {
        self.binary_same(other, Op::Mul, |x, y| x * y)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Result<Var<E>> {
        let a = self.value();
        let ce = E::from_f64_lossy(c);
        self.push(Op::Scale(c), &[], a.shape().to_vec(), a.data().iter().map(|&v| v * ce).collect())
    }

    /// Multiplication by a recorded scalar (shape `[1]`).
    pub fn mul_scalar(&self, s: &Var<E>) -> Result<Var<E>> {
        let (a, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(mismatch("mul_scalar", &[a.shape(), sv.shape()]));
        }
        let k = sv.item();
        self.push(Op::MulScalar, &[s], a.shape().to_vec(), a.data().iter().map(|&v| v * k).collect())
    }

    pub fn sum(&self) -> Result<Var<E>> {
        let v = kernels::sum(self.value().data());
        self.push(Op::Sum, &[], vec![1], vec![E::from_f64_lossy(v)])
    }

    /// `Σ x²`, accumulated in f64.
    pub fn sum_sq(&self) -> Result<Var<E>> {
        let v = kernels::sum_sq(self.value().data());
        self.push(Op::SumSq, &[], vec![1], vec![E::from_f64_lossy(v)])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<E>> {
        let a = self.value();
        let r = a.reshape(shape)?;
        self.push(Op::Reshape, &[], r.shape().to_vec(), r.to_vec())
    }

    /// `[B, d1, d2, ...] → [B, d1·d2·...]`
    pub fn flatten(&self) -> Result<Var<E>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(mismatch("flatten", &[&s]));
        }
        self.reshape(&[s[0], s[1..].iter().product()])
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&self, other: &Var<E>) -> Result<Var<E>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let data = kernels::matmul_nn(a.data(), b.data(), sa[0], sa[1], sb[1]);
        self.push(Op::MatMul, &[other], vec![sa[0], sb[1]], data)
    }

    pub fn transpose(&self) -> Result<Var<E>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", &[s]));
        }
        let data = kernels::transpose(a.data(), s[0], s[1]);
        self.push(Op::Transpose, &[], vec![s[1], s[0]], data)
    }

    /// 3×3 convolution, stride 1, zero padding 1. `self: [B,Ci,H,W]`,
    /// `weight: [Co,Ci,3,3]` → `[B,Co,H,W]`. No bias.
    pub fn conv2d(&self, weight: &Var<E>) -> Result<Var<E>> {
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(mismatch("conv2d", &[sx, sw]));
        }
        let d = ConvDims { batch: sx[0], c_in: sx[1], c_out: sw[0], h: sx[2], w: sx[3] };
        let data = kernels::conv2d(x.data(), w.data(), d);
        self.push(Op::Conv2d, &[weight], vec![d.batch, d.c_out, d.h, d.w], data)
    }

    /// Adjoint of [`Var::conv2d`] in its input. `self` is the upstream
    /// gradient `[B,Co,H,W]`.
    fn conv2d_bwd_input(&self, weight: &Var<E>) -> Result<Var<E>> {
        let (gy, w) = (self.value(), weight.value());
        let (sg, sw) = (gy.shape(), w.shape());
        if sg.len() != 4 || sw.len() != 4 || sw[0] != sg[1] {
            return Err(mismatch("conv2d_bwd_input", &[sg, sw]));
        }
        let d = ConvDims { batch: sg[0], c_in: sw[1], c_out: sw[0], h: sg[2], w: sg[3] };
        let data = kernels::conv2d_bwd_input(gy.data(), w.data(), d);
        self.push(Op::ConvBwdInput, &[weight], vec![d.batch, d.c_in, d.h, d.w], data)
    }

    /// Adjoint of [`Var::conv2d`] in its weight. `self` is the conv input.
    fn conv2d_bwd_weight(&self, gy: &Var<E>) -> Result<Var<E>> {
        let (x, g) = (self.value(), gy.value());
        let (sx, sg) = (x.shape(), g.shape());
        if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] || sx[2..] != sg[2..] {
            return Err(mismatch("conv2d_bwd_weight", &[sx, sg]));
        }
        let d = ConvDims { batch: sx[0], c_in: sx[1], c_out: sg[1], h: sx[2], w: sx[3] };
        let data = kernels::conv2d_bwd_weight(x.data(), g.data(), d);
        self.push(Op::ConvBwdWeight, &[gy], vec![d.c_out, d.c_in, 3, 3], data)
    }

    /// 2×2 mean pooling, stride 2, on `[B,C,H,W]` with even `H`, `W`.
    pub fn avgpool2(&self) -> Result<Var<E>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(mismatch("avgpool2", &[s]));
        }
        let data = kernels::avgpool2(x.data(), s[0] * s[1], s[2], s[3]);
        self.push(Op::AvgPool2, &[], vec![s[0], s[1], s[2] / 2, s[3] / 2], data)
    }

    fn avgpool2_bwd(&self) -> Result<Var<E>> {
        let g = self.value();
        let s = g.shape();
        if s.len() != 4 {
            return Err(mismatch("avgpool2_bwd", &[s]));
        }
        let (h, w) = (s[2] * 2, s[3] * 2);
        let data = kernels::avgpool2_bwd(g.data(), s[0] * s[1], h, w);
        self.push(Op::AvgPool2Bwd, &[], vec![s[0], s[1], h, w], data)
    }

    pub fn relu(&self) -> Result<Var<E>> {
        let x = self.value();
        self.push(Op::Relu, &[], x.shape().to_vec(), x.data().iter().map(|&v| v.max(E::zero())).collect())
    }

    /// `self · [pre > 0]`; the mask is treated as locally constant.
    fn relu_mask(&self, pre: &Var<E>) -> Result<Var<E>> {
        self.binary_same(pre, Op::ReluMask, |g, x| if x > E::zero() { g } else { E::zero() })
    }

    /// `[C] → shape`, where `shape[1] == C`.
    pub fn broadcast_axis1(&self, shape: &[usize]) -> Result<Var<E>> {
        let b = self.value();
        if b.shape().len() != 1 || shape.len() < 2 || shape[1] != b.numel() || shape.contains(&0) {
            return Err(mismatch("broadcast_axis1", &[b.shape(), shape]));
        }
        let data = kernels::broadcast_axis1(b.data(), shape);
        self.push(Op::BroadcastAxis1, &[], shape.to_vec(), data)
    }

    /// Sum over every axis except axis 1.
    pub fn sum_axis1(&self) -> Result<Var<E>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(mismatch("sum_axis1", &[s]));
        }
        let data = kernels::sum_axis1(x.data(), s);
        self.push(Op::SumAxis1, &[], vec![s[1]], data)
    }

    /// Contiguous window of a 1-D tensor, reshaped to `shape`.
    pub fn slice(&self, offset: usize, shape: &[usize]) -> Result<Var<E>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if x.shape().len() != 1 || n == 0 || offset + n > x.numel() {
            return Err(mismatch("slice", &[x.shape(), shape]));
        }
        let data = x.data()[offset..offset + n].to_vec();
        self.push(Op::Slice { offset }, &[], shape.to_vec(), data)
    }

    /// Places `self` (flattened) into a zero vector of length `len`.
    fn embed(&self, offset: usize, len: usize) -> Result<Var<E>> {
        let x = self.value();
        if offset + x.numel() > len {
            return Err(mismatch("embed", &[x.shape(), &[len]]));
        }
        let mut data = vec![E::zero(); len];
        data[offset..offset + x.numel()].copy_from_slice(x.data());
        self.push(Op::Embed { offset, len }, &[], vec![len], data)
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch(op, &[&s]));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of `[B,K]`.
    pub fn softmax(&self) -> Result<Var<E>> {
        let (r, c) = self.rows_cols("softmax")?;
        let data = kernels::softmax_rows(self.value().data(), r, c);
        self.push(Op::Softmax, &[], vec![r, c], data)
    }

    pub fn log_softmax(&self) -> Result<Var<E>> {
        let (r, c) = self.rows_cols("log_softmax")?;
        let data = kernels::log_softmax_rows(self.value().data(), r, c);
        self.push(Op::LogSoftmax, &[], vec![r, c], data)
    }

    fn row_sum_broadcast(&self) -> Result<Var<E>> {
        let (r, c) = self.rows_cols("row_sum_broadcast")?;
        let data = kernels::row_sum_broadcast(self.value().data(), r, c);
        self.push(Op::RowSumBroadcast, &[], vec![r, c], data)
    }

    /// Mean over the batch of `-Σ_k target_k · log softmax(self)_k`.
    /// Differentiable in both the logits and the targets.
    pub fn softmax_cross_entropy(&self, target: &Var<E>) -> Result<Var<E>> {
        let (z, y) = (self.value(), target.value());
        if z.shape().len() != 2 || z.shape() != y.shape() {
            return Err(mismatch("softmax_cross_entropy", &[z.shape(), y.shape()]));
        }
        let (r, c) = (z.shape()[0], z.shape()[1]);
        let v = kernels::softmax_cross_entropy(z.data(), y.data(), r, c);
        self.push(Op::SoftmaxCe, &[target], vec![1], vec![E::from_f64_lossy(v)])
    }

    /// Each element replaced by the mean of its trailing `H×W` plane.
    pub fn plane_mean_broadcast(&self) -> Result<Var<E>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 3 {
            return Err(mismatch("plane_mean_broadcast", &[s]));
        }
        let data = kernels::plane_mean_broadcast(x.data(), s[s.len() - 2] * s[s.len() - 1]);
        self.push(Op::PlaneMeanBroadcast, &[], s.to_vec(), data)
    }

    /// `(self + c)^p` element-wise.
    pub fn add_pow(&self, c: f64, p: f64) -> Result<Var<E>> {
        let x = self.value();
        let (ce, pe) = (E::from_f64_lossy(c), E::from_f64_lossy(p));
        let data = x.data().iter().map(|&v| (v + ce).powf(pe)).collect();
        self.push(Op::AddPow { c, p }, &[], x.shape().to_vec(), data)
    }

    fn ones_like(&self) -> Result<Var<E>> {
        self.graph.leaf(Tensor::full(&self.shape(), E::one()))
    }
}

/// The primitive set exposed through [`primitive_apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `[m,k] · [k,n]`
    MatMul,
    /// input `[B,Ci,H,W]`, weight `[Co,Ci,3,3]`
    Conv2d,
    Relu,
    /// `[B,C,H,W]` with even `H`, `W`
    AvgPool2,
    /// equal shapes
    Add,
    Scale(f64),
    /// `[B, ...] → [B, prod(...)]`
    Flatten,
    /// logits `[B,K]`, targets `[B,K]` → `[1]`
    SoftmaxCrossEntropy,
    /// any shape → `[1]`
    SumSq,
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Conv2d | Primitive::Add | Primitive::SoftmaxCrossEntropy => 2,
            _ => 1,
        }
    }
}

pub fn primitive_apply<E: Element>(op: Primitive, args: &[Var<E>]) -> Result<Var<E>> {
    if args.len() != op.arity() {
        return Err(TensorError::Arity { op: "primitive_apply", expected: op.arity(), got: args.len() });
    }
    let a = &args[0];
    match op {
        Primitive::MatMul => a.matmul(&args[1]),
        Primitive::Conv2d => a.conv2d(&args[1]),
        Primitive::Relu => a.relu(),
        Primitive::AvgPool2 => a.avgpool2(),
        Primitive::Add => a.add(&args[1]),
        Primitive::Scale(c) => a.scale(c),
        Primitive::Flatten => a.flatten(),
        Primitive::SoftmaxCrossEntropy => a.softmax_cross_entropy(&args[1]),
        Primitive::SumSq => a.sum_sq(),
    }
}

/// Vector-Jacobian products of one node, expressed as new recorded nodes.
/// `wanted[i]` says whether input `i` needs a gradient.
fn vjp<E: Element>(
    op: Op,
    inputs: &[Var<E>],
    out: &Var<E>,
    g: &Var<E>,
    wanted: &[bool],
) -> Result<Vec<Option<Var<E>>>> {
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    let x = |i: usize| &inputs[i];
    let mut res: Vec<Option<Var<E>>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::Add => {
            res[0] = Some(g.clone());
            res[1] = Some(g.clone());
        }
        Op::Sub => {
            res[0] = Some(g.clone());
            if want(1) {
                res[1] = Some(g.scale(-1.0)?);
            }
        }
        Op::Mul => {
            if want(0) {
                res[0] = Some(g.mul(x(1))?);
            }
            if want(1) {
                res[1] = Some(g.mul(x(0))?);
            }
        }
        Op::Scale(c) => res[0] = Some(g.scale(c)?),
        Op::MulScalar => {
            if want(0) {
                res[0] = Some(g.mul_scalar(x(1))?);
            }
            if want(1) {
                res[1] = Some(g.mul(x(0))?.sum()?);
            }
        }
        Op::Sum => res[0] = Some(x(0).ones_like()?.mul_scalar(g)?),
        Op::SumSq => res[0] = Some(x(0).scale(2.0)?.mul_scalar(g)?),
        Op::Reshape => res[0] = Some(g.reshape(&x(0).shape())?),
        Op::MatMul => {
            if want(0) {
                res[0] = Some(g.matmul(&x(1).transpose()?)?);
            }
            if want(1) {
                res[1] = Some(x(0).transpose()?.matmul(g)?);
            }
        }
        Op::Transpose => res[0] = Some(g.transpose()?),
        Op::Conv2d => {
            // y = conv(x, w)
            if want(0) {
                res[0] = Some(g.conv2d_bwd_input(x(1))?);
            }
            if want(1) {
                res[1] = Some(x(0).conv2d_bwd_weight(g)?);
            }
        }
        Op::ConvBwdInput => {
            // out = convᵀ(gy, w);  <u, out> = <conv(u, w), gy>
            if want(0) {
                res[0] = Some(g.conv2d(x(1))?);
            }
            if want(1) {
                res[1] = Some(g.conv2d_bwd_weight(x(0))?);
            }
        }
        Op::ConvBwdWeight => {
            // out = bwd_weight(x, gy);  <v, out> = <conv(x, v), gy>
            if want(0) {
                res[0] = Some(x(1).conv2d_bwd_input(g)?);
            }
            if want(1) {
                res[1] = Some(x(0).conv2d(g)?);
            }
        }
        Op::AvgPool2 => res[0] = Some(g.avgpool2_bwd()?),
        Op::AvgPool2Bwd => res[0] = Some(g.avgpool2()?),
        Op::Relu => res[0] = Some(g.relu_mask(x(0))?),
        Op::ReluMask => {
            if want(0) {
                res[0] = Some(g.relu_mask(x(1))?);
            }
            // zero almost everywhere in the mask argument
        }
        Op::BroadcastAxis1 => res[0] = Some(g.sum_axis1()?),
        Op::SumAxis1 => res[0] = Some(g.broadcast_axis1(&x(0).shape())?),
        Op::Slice { offset } => {
            let len = x(0).shape()[0];
            res[0] = Some(g.embed(offset, len)?);
        }
        Op::Embed { offset, .. } => {
            let shape = x(0).shape();
            res[0] = Some(g.slice(offset, &[shape.iter().product()])?.reshape(&shape)?);
        }
        Op::Softmax => {
            // s ⊙ (g − rowsum(g ⊙ s))
            let s = out;
            let inner = g.sub(&g.mul(s)?.row_sum_broadcast()?)?;
            res[0] = Some(s.mul(&inner)?);
        }
        Op::LogSoftmax => {
            let s = x(0).softmax()?;
            res[0] = Some(g.sub(&s.mul(&g.row_sum_broadcast()?)?)?);
        }
        Op::RowSumBroadcast => res[0] = Some(g.row_sum_broadcast()?),
        Op::SoftmaxCe => {
            let (z, y) = (x(0), x(1));
            let batch = z.shape()[0] as f64;
            if want(0) {
                // (softmax(z) · rowsum(y) − y) / B
                let s = z.softmax()?;
                let dz = s.mul(&y.row_sum_broadcast()?)?.sub(y)?.scale(1.0 / batch)?;
                res[0] = Some(dz.mul_scalar(g)?);
            }
            if want(1) {
                let dy = z.log_softmax()?.scale(-1.0 / batch)?;
                res[1] = Some(dy.mul_scalar(g)?);
            }
        }
        Op::PlaneMeanBroadcast => res[0] = Some(g.plane_mean_broadcast()?),
        Op::AddPow { c, p } => {
            let d = x(0).add_pow(c, p - 1.0)?.scale(p)?;
            res[0] = Some(g.mul(&d)?);
        }
    }
    Ok(res)
}

/// `∂root/∂leaf` for each leaf.
///
/// The reverse sweep records its work as ordinary nodes on the same graph,
/// so the returned gradients are themselves differentiable. Leaves may be
/// any recorded node, including intermediate results; the gradient is then
/// taken with respect to that node's value. Gradients flow only along paths
/// that connect a requested leaf to the root.
pub fn gradient<E: Element>(root: &Var<E>, leaves: &[Var<E>]) -> Result<Vec<Var<E>>> {
    let root_shape = root.shape();
    if root_shape.iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalarRoot { shape: root_shape });
    }
    let graph = root.graph.clone();
    let n = root.id + 1;

    let (inputs_of, ops): (Vec<Vec<usize>>, Vec<Op>) = {
        let nodes = graph.nodes.borrow();
        nodes[..n].iter().map(|nd| (nd.inputs.clone(), nd.op)).unzip()
    };

    // forward: depends on some leaf; backward: reaches the root
    let mut depends = vec![false; n];
    for (i, leaf) in leaves.iter().enumerate() {
        if !graph.same(&leaf.graph) || leaf.id >= n {
            return Err(TensorError::LeafNotInGraph { index: i });
        }
        depends[leaf.id] = true;
    }
    for i in 0..n {
        if !depends[i] && inputs_of[i].iter().any(|&j| depends[j]) {
            depends[i] = true;
        }
    }
    let mut reaches = vec![false; n];
    reaches[root.id] = true;
    for i in (0..n).rev() {
        if reaches[i] {
            for &j in &inputs_of[i] {
                reaches[j] = true;
            }
        }
    }
    for (i, leaf) in leaves.iter().enumerate() {
        if !reaches[leaf.id] {
            return Err(TensorError::LeafNotInGraph { index: i });
        }
    }
    let active: Vec<bool> = (0..n).map(|i| depends[i] && reaches[i]).collect();

    let mut grads: Vec<Option<Var<E>>> = vec![None; n];
    grads[root.id] = Some(root.ones_like()?);
    let mut results: Vec<Option<Var<E>>> = vec![None; leaves.len()];
    let lowest_leaf = leaves.iter().map(|l| l.id).min().unwrap_or(n);

    for i in (lowest_leaf..n).rev() {
        if !active[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        for (k, leaf) in leaves.iter().enumerate() {
            if leaf.id == i {
                results[k] = Some(g.clone());
            }
        }
        let ins: Vec<Var<E>> = inputs_of[i].iter().map(|&j| Var { graph: graph.clone(), id: j }).collect();
        let wanted: Vec<bool> = inputs_of[i].iter().map(|&j| active[j]).collect();
        if !wanted.iter().any(|&w| w) {
            continue;
        }
        let out = Var { graph: graph.clone(), id: i };
        let contributions = vjp(ops[i], &ins, &out, &g, &wanted)?;
        for ((&j, c), &w) in inputs_of[i].iter().zip(contributions).zip(&wanted) {
            let (Some(c), true) = (c, w) else { continue };
            grads[j] = Some(match grads[j].take() {
                Some(prev) => prev.add(&c)?,
                None => c,
            });
        }
    }

    results
        .into_iter()
        .enumerate()
        .map(|(k, r)| match r {
            Some(v) => Ok(v),
            None => Err(TensorError::LeafNotInGraph { index: k }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(x: f64) -> (Graph<f64>, Var<f64>) {
        let g = Graph::new();
        let v = g.scalar(x).unwrap();
        (g, v)
    }

    #[test]
    fn square_derivative() {
        let (_, x) = scalar_graph(3.0);
        let y = x.mul(&x).unwrap();
        let d = gradient(&y, &[x]).unwrap();
        assert_eq!(d[0].item(), 6.0);
    }

    #[test]
    fn nested_cube() {
        let (_, x) = scalar_graph(2.0);
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let d1 = gradient(&y, std::slice::from_ref(&x)).unwrap().remove(0);
        assert!((d1.item() - 12.0).abs() < 1e-12);
        let d2 = gradient(&d1, &[x]).unwrap().remove(0);
        assert!((d2.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn fourth_power_second_derivative() {
        for x0 in [-2.0, 0.5, 3.0] {
            let (_, x) = scalar_graph(x0);
            let x2 = x.mul(&x).unwrap();
            let y = x2.mul(&x2).unwrap();
            let d1 = gradient(&y, std::slice::from_ref(&x)).unwrap().remove(0);
            let d2 = gradient(&d1, &[x]).unwrap().remove(0);
            let expect = 12.0 * x0 * x0;
            assert!(((d2.item() - expect) / expect).abs() < 1e-4);
        }
    }

    #[test]
    fn third_order() {
        let (_, x) = scalar_graph(1.5);
        let y = x.mul(&x).unwrap().mul(&x).unwrap().mul(&x).unwrap();
        let d1 = gradient(&y, std::slice::from_ref(&x)).unwrap().remove(0);
        let d2 = gradient(&d1, std::slice::from_ref(&x)).unwrap().remove(0);
        let d3 = gradient(&d2, &[x]).unwrap().remove(0);
        assert!((d3.item() - 24.0 * 1.5).abs() < 1e-9);
    }

    #[test]
    fn sum_sq_minimum_has_zero_gradient() {
        let g = Graph::<f64>::new();
        let c = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let w = g.leaf(c.clone()).unwrap();
        let cv = g.leaf(c).unwrap();
        let loss = w.sub(&cv).unwrap().sum_sq().unwrap();
        let d = gradient(&loss, &[w]).unwrap();
        assert!(d[0].value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_and_identity_matmul() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let eye = g.leaf(Tensor::from_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let m = Tensor::from_slice(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mv = g.leaf(m.clone()).unwrap();
        assert_eq!(eye.matmul(&mv).unwrap().value(), m);
    }

    #[test]
    fn cross_entropy_of_uniform_two_class() {
        let g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_slice(&[1, 2], &[0.0, 0.0]).unwrap()).unwrap();
        let y = g.leaf(Tensor::from_slice(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
        let l = primitive_apply(Primitive::SoftmaxCrossEntropy, &[z, y]).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn errors_are_explicit() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        match a.matmul(&b) {
            Err(TensorError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(gradient(&a, &[b.clone()]), Err(TensorError::NonScalarRoot { .. })));
        let s = a.sum().unwrap();
        assert!(matches!(gradient(&s, &[b]), Err(TensorError::LeafNotInGraph { index: 0 })));
        let other = Graph::<f32>::new().leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(gradient(&s, &[other.clone()]), Err(TensorError::LeafNotInGraph { .. })));
        assert!(matches!(a.add(&other), Err(TensorError::GraphMismatch)));
        let bad = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(matches!(g.leaf(bad), Err(TensorError::NonFinite { .. })));
        assert!(matches!(
            primitive_apply(Primitive::Add, std::slice::from_ref(&a)),
            Err(TensorError::Arity { .. })
        ));
    }

    #[test]
    fn overflow_is_reported_as_non_finite() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::full(&[2], 3e38)).unwrap();
        assert!(matches!(a.add(&a), Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn gradient_through_intermediate_leaf() {
        // leaves can be computed nodes: d/dh of (h·h) where h = 2x
        let (_, x) = scalar_graph(1.5);
        let h = x.scale(2.0).unwrap();
        let y = h.mul(&h).unwrap();
        let d = gradient(&y, &[h.clone(), x]).unwrap();
        assert_eq!(d[0].item(), 6.0);
        assert_eq!(d[1].item(), 12.0);
    }
}
