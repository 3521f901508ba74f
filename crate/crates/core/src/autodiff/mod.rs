//! Define-by-run reverse-mode differentiation over tensor ops.
//!
//! Every op appends exactly one node to a [`Tape`]; a node's inputs always
//! precede it, so [`Tape::backward`] is a single reverse sweep. The op set is
//! a closed enum and the backward rule is an exhaustive `match`, so an op
//! without a backward rule does not compile.

mod gradcheck;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ssm::kernel::{self, ScanShape};
use crate::tensor::{
    self, dims4, dwconv2d_backward, gemm, gemm_at_acc, gemm_bt_acc, layernorm_backward, layernorm_forward,
    space_to_depth_backward, LayerNormSaved, Real, Tensor,
};

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved<T>,
    },
    DwConv(Var, Var),
    AvgPool(Var),
    ScaleChannels(Var, Var),
    Reshape(Var),
    Gather {
        x: Var,
        order: Arc<[usize]>,
    },
    ChannelSelect {
        a: Var,
        b: Var,
        take_b: Arc<[bool]>,
    },
    Concat(Var, Var),
    SpaceToDepth(Var, usize),
    Sum(Var),
    Mean(Var),
    Scan {
        inputs: ScanVars,
        states: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

/// Inputs of a fused selective-scan node.
///
/// Shapes: `x`, `delta`: `[B, L, C]`; `a`: `[C, N]`; `b`, `c`: `[B, L, N]`;
/// `d`: `[C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanVars {
    pub x: Var,
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Matmul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::DwConv(..) => "dwconv2d",
            Op::AvgPool(..) => "global_avg_pool",
            Op::ScaleChannels(..) => "scale_channels",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::ChannelSelect { .. } => "channel_select",
            Op::Concat(..) => "concat",
            Op::SpaceToDepth(..) => "space_to_depth",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scan { .. } => "selective_scan",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "bce_multilabel",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Recorded computation. One tape per thread of training.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Value id -> gradient. Absent entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: scales every input gradient produced by ops named
    /// `op` by 1.5, simulating a broken backward rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient (data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(op, value, needs)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First node holding a non-finite value, as `(var, op name)`.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    /// `(node, inputs)` of every selective-scan node in recording order.
    pub fn scan_nodes(&self) -> Vec<(Var, ScanVars)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Scan { inputs, .. } => Some((Var(i), *inputs)),
                _ => None,
            })
            .collect()
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.name();
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.push(Op::Exp(a), value, &[a])
    }

    /// `x: [..., K]` times `w: [K, P]` -> `[..., P]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let &[k, p] = ws else {
            return Err(Error::dim("matmul", xs, ws));
        };
        if *xs.last().expect("rank >= 1") != k {
            return Err(Error::dim("matmul", xs, ws));
        }
        let m = self.value(x).len() / k;
        let mut out = vec![T::zero(); m * p];
        gemm(self.value(x).data(), self.value(w).data(), m, k, p, &mut out);
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank >= 1") = p;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Matmul(x, w), value, &[x, w]))
    }

    /// Adds `bias: [C]` to every row of `x: [..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let bd = self.value(bias).data();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), value, &[x, bias]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).silu();
        self.push(Op::Silu(x), value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).sigmoid();
        self.push(Op::Sigmoid(x), value, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        self.push(Op::Relu(x), value, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).softplus();
        self.push(Op::Softplus(x), value, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).rank() - 1;
        let value = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax(x), value, &[x]))
    }

    /// Layer normalisation over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (value, saved) = layernorm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, saved }, value, &[x, gamma, beta]))
    }

    pub fn dwconv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let value = tensor::conv_forward(self.value(x), self.value(kernels))?;
        Ok(self.push(Op::DwConv(x, kernels), value, &[x, kernels]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = tensor::pool_forward(self.value(x))?;
        Ok(self.push(Op::AvgPool(x), value, &[x]))
    }

    /// `x: [B, ..., C]` scaled per `(batch, channel)` by `s: [B, C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        let (b, c) = (xs[0], *xs.last().expect("rank >= 1"));
        if xs.len() < 2 || ss != [b, c] {
            return Err(Error::dim("scale_channels", xs, ss));
        }
        let mut value = self.value(x).clone();
        let per_batch = value.len() / b;
        let sd = self.value(s).data();
        for (bi, chunk) in value.data_mut().chunks_exact_mut(per_batch).enumerate() {
            let gate = &sd[bi * c..(bi + 1) * c];
            for row in chunk.chunks_exact_mut(c) {
                for (v, &g) in row.iter_mut().zip(gate) {
                    *v *= g;
                }
            }
        }
        Ok(self.push(Op::ScaleChannels(x, s), value, &[x, s]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value, &[x]))
    }

    /// Reorders positions: `x` viewed as `[B, P, C]`, output
    /// `[B, order.len(), C]` with `out[b, k] = x[b, order[k]]`.
    pub fn gather(&mut self, x: Var, order: Arc<[usize]>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::contract("gather", format!("rank >= 2 required, got {xs:?}")));
        }
        let (b, c) = (xs[0], *xs.last().expect("rank >= 2"));
        let p = self.value(x).len() / (b * c);
        if order.iter().any(|&o| o >= p) {
            return Err(Error::contract(
                "gather",
                format!("index out of range for {p} positions"),
            ));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * order.len() * c);
        for bi in 0..b {
            for &o in order.iter() {
                out.extend_from_slice(&xd[(bi * p + o) * c..][..c]);
            }
        }
        let value = Tensor::from_parts(vec![b, order.len(), c], out);
        Ok(self.push(Op::Gather { x, order }, value, &[x]))
    }

    /// Channel routing: `out[..., c] = if take_b[c] { b } else { a }`.
    pub fn channel_select(&mut self, a: Var, b: Var, take_b: Arc<[bool]>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("channel_select", self.shape(a), self.shape(b)));
        }
        let c = self.value(a).last_dim();
        if take_b.len() != c {
            return Err(Error::dim("channel_select", self.shape(a), &[take_b.len()]));
        }
        let mut value = self.value(a).clone();
        let bd = self.value(b).data();
        for (row, brow) in value.data_mut().chunks_exact_mut(c).zip(bd.chunks_exact(c)) {
            for ch in 0..c {
                if take_b[ch] {
                    row[ch] = brow[ch];
                }
            }
        }
        Ok(self.push(Op::ChannelSelect { a, b, take_b }, value, &[a, b]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", sa, sb));
        }
        let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks_exact(ca)
            .zip(self.value(b).data().chunks_exact(cb))
        {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Concat(a, b), value, &[a, b]))
    }

    pub fn space_to_depth(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = tensor::space_to_depth(self.value(x), factor)?;
        Ok(self.push(Op::SpaceToDepth(x, factor), value, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean(x), value, &[x])
    }

    /// Fused selective scan with a single reverse-time adjoint backward rule.
    pub fn selective_scan(&mut self, inputs: ScanVars) -> Result<Var> {
        let shape = self.scan_shape(&inputs)?;
        let mut states = vec![T::zero(); shape.states_len()];
        let y = {
            let ins = self.scan_inputs(&inputs);
            kernel::scan_forward(&ins, shape, Some(&mut states))?
        };
        let value = Tensor::from_parts(vec![shape.batch, shape.len, shape.channels], y);
        let ScanVars { x, delta, a, b, c, d } = inputs;
        Ok(self.push(Op::Scan { inputs, states }, value, &[x, delta, a, b, c, d]))
    }

    fn scan_shape(&self, v: &ScanVars) -> Result<ScanShape> {
        let xs = self.shape(v.x);
        let &[batch, len, channels] = xs else {
            return Err(Error::contract(
                "selective_scan",
                format!("x must be [B, L, C], got {xs:?}"),
            ));
        };
        let a_shape = self.shape(v.a);
        let &[ac, state] = a_shape else {
            return Err(Error::dim("selective_scan", xs, a_shape));
        };
        let checks: [(&[usize], Vec<usize>); 5] = [
            (self.shape(v.delta), vec![batch, len, channels]),
            (a_shape, vec![channels, state]),
            (self.shape(v.b), vec![batch, len, state]),
            (self.shape(v.c), vec![batch, len, state]),
            (self.shape(v.d), vec![channels]),
        ];
        for (got, want) in checks {
            if got != want.as_slice() {
                return Err(Error::dim("selective_scan", got, &want));
            }
        }
        debug_assert_eq!(ac, channels);
        Ok(ScanShape {
            batch,
            len,
            channels,
            state,
        })
    }

    fn scan_inputs(&self, v: &ScanVars) -> kernel::ScanInputs<'_, T> {
        kernel::ScanInputs {
            x: self.value(v.x).data(),
            delta: self.value(v.delta).data(),
            a: self.value(v.a).data(),
            b: self.value(v.b).data(),
            c: self.value(v.c).data(),
            d: self.value(v.d).data(),
        }
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = crate::train::loss::cross_entropy_forward(self.value(logits), labels)?;
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            &[logits],
        ))
    }

    /// Mean binary cross-entropy with logits over `[B, K]`.
    pub fn bce_multilabel(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let loss = crate::train::loss::bce_forward(self.value(logits), targets)?;
        Ok(self.push(
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                let mut contribs = self.backprop(i, &g)?;
                if self.fault.as_deref() == Some(self.nodes[i].op.name()) {
                    for (_, t) in contribs.iter_mut() {
                        *t = t.scale(T::of(1.5));
                    }
                }
                for (v, t) in contribs {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&t)?,
                        slot @ None => *slot = Some(t),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(2);
        let mut emit = |v: Var, t: Tensor<T>| {
            if self.needs(v) {
                out.push((v, t));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::Sub(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    emit(*a, g.mul(self.value(*b))?);
                }
                if self.needs(*b) {
                    emit(*b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale(a, s) => emit(*a, g.scale(*s)),
            Op::Exp(a) => emit(*a, g.mul(y)?),
            Op::Matmul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, p) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k;
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    gemm_bt_acc(g.data(), wv.data(), m, k, p, &mut gx);
                    emit(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); wv.len()];
                    gemm_at_acc(xv.data(), g.data(), m, k, p, &mut gw);
                    emit(*w, Tensor::from_parts(wv.shape().to_vec(), gw));
                }
            }
            Op::AddBias(x, b) => {
                emit(*x, g.clone());
                let c = g.last_dim();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks_exact(c) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                emit(*b, Tensor::from_parts(vec![c], gb));
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), "silu", |gv, xv| {
                    let s = tensor::sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                })?;
                emit(*x, gx);
            }
            Op::Sigmoid(x) => emit(*x, g.zip_map(y, "sigmoid", |gv, s| gv * s * (T::one() - s))?),
            Op::Relu(x) => emit(
                *x,
                g.zip_map(
                    self.value(*x),
                    "relu",
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                )?,
            ),
            Op::Softplus(x) => emit(
                *x,
                g.zip_map(self.value(*x), "softplus", |gv, xv| gv * tensor::sigmoid(xv))?,
            ),
            Op::Softmax(x) => {
                let k = y.last_dim();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in g
                    .data()
                    .chunks_exact(k)
                    .zip(y.data().chunks_exact(k))
                    .zip(gx.chunks_exact_mut(k))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                emit(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (gx, gg, gb) = layernorm_backward(saved, self.value(*gamma).data(), g.data());
                emit(*x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                emit(*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), gg));
                emit(*beta, Tensor::from_parts(self.shape(*beta).to_vec(), gb));
            }
            Op::DwConv(x, k) => {
                let (gx, gk) = dwconv2d_backward(self.value(*x), self.value(*k), g)?;
                emit(*x, gx);
                emit(*k, gk);
            }
            Op::AvgPool(x) => {
                let (b, h, w, c) = dims4(self.shape(*x), "global_avg_pool")?;
                let inv = T::one() / T::of((h * w) as f64);
                let mut gx = Vec::with_capacity(b * h * w * c);
                for bi in 0..b {
                    let row: Vec<T> = g.data()[bi * c..(bi + 1) * c].iter().map(|&v| v * inv).collect();
                    for _ in 0..h * w {
                        gx.extend_from_slice(&row);
                    }
                }
                emit(*x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::ScaleChannels(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let (b, c) = (sv.shape()[0], sv.shape()[1]);
                let per_batch = xv.len() / b;
                let mut gx = vec![T::zero(); xv.len()];
                let mut gs = vec![T::zero(); b * c];
                for bi in 0..b {
                    let gate = &sv.data()[bi * c..(bi + 1) * c];
                    let range = bi * per_batch..(bi + 1) * per_batch;
                    for ((gr, xr), gxr) in g.data()[range.clone()]
                        .chunks_exact(c)
                        .zip(xv.data()[range.clone()].chunks_exact(c))
                        .zip(gx[range].chunks_exact_mut(c))
                    {
                        for ch in 0..c {
                            gxr[ch] = gr[ch] * gate[ch];
                            gs[bi * c + ch] += gr[ch] * xr[ch];
                        }
                    }
                }
                emit(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                emit(*s, Tensor::from_parts(sv.shape().to_vec(), gs));
            }
            Op::Reshape(x) => emit(*x, g.reshape(self.shape(*x).to_vec())?),
            Op::Gather { x, order } => {
                let xs = self.shape(*x);
                let (b, c) = (xs[0], *xs.last().expect("rank >= 2"));
                let p = self.value(*x).len() / (b * c);
                let mut gx = vec![T::zero(); b * p * c];
                for bi in 0..b {
                    for (k, &o) in order.iter().enumerate() {
                        let src = &g.data()[(bi * order.len() + k) * c..][..c];
                        for (acc, &v) in gx[(bi * p + o) * c..][..c].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                emit(*x, Tensor::from_parts(xs.to_vec(), gx));
            }
            Op::ChannelSelect { a, b, take_b } => {
                let c = take_b.len();
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (ra, rb) in ga.data_mut().chunks_exact_mut(c).zip(gb.data_mut().chunks_exact_mut(c)) {
                    for ch in 0..c {
                        if take_b[ch] {
                            ra[ch] = T::zero();
                        } else {
                            rb[ch] = T::zero();
                        }
                    }
                }
                emit(*a, ga);
                emit(*b, gb);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                emit(*a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
                emit(*b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
            }
            Op::SpaceToDepth(x, f) => emit(*x, space_to_depth_backward(g, self.shape(*x), *f)),
            Op::Sum(x) => emit(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0])),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                emit(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0] / n));
            }
            Op::Scan { inputs, states } => {
                let shape = self.scan_shape(inputs)?;
                let ins = self.scan_inputs(inputs);
                let sg = kernel::scan_backward(&ins, shape, states, g.data());
                let ScanVars { x, delta, a, b, c, d } = *inputs;
                emit(x, Tensor::from_parts(self.shape(x).to_vec(), sg.x));
                emit(delta, Tensor::from_parts(self.shape(delta).to_vec(), sg.delta));
                emit(a, Tensor::from_parts(self.shape(a).to_vec(), sg.a));
                emit(b, Tensor::from_parts(self.shape(b).to_vec(), sg.b));
                emit(c, Tensor::from_parts(self.shape(c).to_vec(), sg.c));
                emit(d, Tensor::from_parts(self.shape(d).to_vec(), sg.d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let mut gx = probs.clone();
                for (row, &label) in gx.chunks_exact_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                emit(*logits, Tensor::from_parts(self.shape(*logits).to_vec(), gx));
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / T::of(z.len() as f64);
                let gx = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zv, &t)| (tensor::sigmoid(zv) - t) * scale)
                    .collect();
                emit(*logits, Tensor::from_parts(z.shape().to_vec(), gx));
            }
        }
        Ok(out)
    }
}
