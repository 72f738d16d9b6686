//! Computation graph with lazy forward evaluation and reverse-mode backprop.
//!
//! Nodes live in an append-only arena. A node can only reference nodes that
//! already exist, so every graph is acyclic by construction and the creation
//! index is a valid topological order. The evaluation order for a given root
//! is the sorted set of its ancestors; it is computed once and cached, which
//! makes re-running a fixed graph with fresh leaf payloads cheap.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use crate::kernels;
use crate::tensor::{numel, Tensor};
use crate::AutodiffError;

/// Lower and upper clamp applied to the argument of [`Graph::log`].
pub const LOG_CLAMP_MIN: f64 = 1e-12;
pub const LOG_CLAMP_MAX: f64 = 1.0;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined primitive. Used for experimental ops and for exercising the
/// gradient checker against deliberately wrong backward rules.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String>;
    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]);
    /// Gradient contribution for every input, given the upstream gradient.
    fn backward(&self, inputs: &[&[f64]], out: &[f64], upstream: &[f64]) -> Vec<Vec<f64>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: kernels::ConvGeom,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    SoftmaxXent(Var, Var),
    SmoothL1(Var),
    BroadcastTo(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Grl(Var, f64),
    Detach(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::SoftmaxXent(..) => "softmax_xent",
            Op::SmoothL1(..) => "smooth_l1",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Grl(..) => "grl",
            Op::Detach(..) => "detach",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::SoftmaxXent(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::SmoothL1(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Grl(a, _)
            | Op::Detach(a) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    /// Scratch kept between forward and backward (im2col buffer for conv).
    aux: Vec<f64>,
    requires_grad: bool,
}

/// Arena of differentiable nodes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    order_cache: HashMap<usize, Arc<[usize]>>,
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn same_or_scalar(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        Some(a.to_vec())
    } else if numel(b) == 1 {
        Some(a.to_vec())
    } else if numel(a) == 1 {
        Some(b.to_vec())
    } else {
        None
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(v.0))
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Detach(_) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let n = numel(&shape);
        self.nodes.push(Node {
            op,
            shape,
            value: vec![0.0; n],
            grad: Vec::new(),
            aux: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, inputs: &[Var], detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            detail,
        }
    }

    // ----- leaves -------------------------------------------------------

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.input(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf that does not receive a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let v = self.push(Op::Leaf, shape);
        self.nodes[v.0].value = t.into_data();
        v
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    /// Replace the payload of a leaf. The shape must not change.
    pub fn set_value(&mut self, v: Var, t: &Tensor) -> Result<()> {
        self.check(v)?;
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(v.0));
        }
        if node.shape != t.shape() {
            return Err(AutodiffError::ShapeMismatch {
                node: v.0,
                op: "set_value",
                inputs: vec![v.0],
                detail: format!("leaf has shape {:?}, got {:?}", node.shape, t.shape()),
            });
        }
        node.value.copy_from_slice(t.data());
        Ok(())
    }

    /// Mutable payload of a leaf, for in-place updates.
    pub fn leaf_data_mut(&mut self, v: Var) -> Result<&mut [f64]> {
        self.check(v)?;
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(v.0));
        }
        Ok(&mut node.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.node(v).op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.node(v).op.parents()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Current payload, as of the last forward evaluation touching `v`.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone())
    }

    pub fn value_data(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Gradient from the most recent [`Graph::backprop`]; zeros if `v` was
    /// not on a differentiable path to the root.
    pub fn grad(&self, v: Var) -> Tensor {
        let n = self.node(v);
        if n.grad.len() == n.value.len() {
            Tensor::new(&n.shape, n.grad.clone())
        } else {
            Tensor::zeros(&n.shape)
        }
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        let n = self.node(v);
        (n.grad.len() == n.value.len()).then_some(&n.grad[..])
    }

    // ----- primitives ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, tag: &'static str) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        same_or_scalar(&self.node(a).shape, &self.node(b).shape).ok_or_else(|| {
            self.mismatch(
                tag,
                &[a, b],
                format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            )
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    /// Element-wise product; either side may be a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Scale(a, c), shape))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::AddScalar(a, c), shape))
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.scale(a, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &[a, b], format!("{:?} x {:?}", sa, sb)));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::Matmul(a, b), shape))
    }

    /// 2-D convolution of a `[c_in, h, w]` map with `[c_out, c_in, k, k]`
    /// filters and optional `[c_out]` bias, zero padding on every side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let mut ins = vec![x, w];
        if let Some(b) = b {
            self.check(b)?;
            ins.push(b);
        }
        let (sx, sw) = (&self.node(x).shape, &self.node(w).shape);
        let bad = |detail: String| self.mismatch("conv2d", &ins, detail);
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sx[0] != sw[1] || stride == 0 {
            return Err(bad(format!("input {:?}, filters {:?}, stride {}", sx, sw, stride)));
        }
        if let Some(b) = b {
            if self.node(b).shape != [sw[0]] {
                return Err(bad(format!("bias {:?} for {} filters", self.node(b).shape, sw[0])));
            }
        }
        let k = sw[2];
        if sx[1] + 2 * padding < k || sx[2] + 2 * padding < k {
            return Err(bad(format!("kernel {} larger than padded input {:?}", k, sx)));
        }
        let geom = kernels::ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            c_out: sw[0],
            k,
            stride,
            pad: padding,
        };
        let shape = vec![geom.c_out, geom.h_out(), geom.w_out()];
        Ok(self.push(Op::Conv2d { x, w, b, geom }, shape))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::LeakyRelu(a, alpha), shape))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Sigmoid(a), shape))
    }

    /// Natural log of the argument clamped to `[1e-12, 1]`. Intended for
    /// probabilities; the gradient is zero where the clamp is active.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Log(a), shape))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Exp(a), shape))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::SumAll(a), vec![]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        Ok(self.push(Op::MeanAll(a), vec![]))
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let s = &self.node(a).shape;
        if axis >= s.len() {
            return Err(self.mismatch("sum_axis", &[a], format!("axis {} of {:?}", axis, s)));
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(Op::SumAxis(a, axis), shape))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.sum_axis(a, axis)?;
        let n = self.node(a).shape[axis] as f64;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax cross-entropy: logits `[n, c]` against target
    /// distributions `[n, c]`, giving `[n]` per-row losses.
    pub fn softmax_xent(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check(logits)?;
        self.check(targets)?;
        let (sl, st) = (&self.node(logits).shape, &self.node(targets).shape);
        if sl.len() != 2 || sl != st {
            return Err(self.mismatch(
                "softmax_xent",
                &[logits, targets],
                format!("{:?} vs {:?}", sl, st),
            ));
        }
        let shape = vec![sl[0]];
        Ok(self.push(Op::SoftmaxXent(logits, targets), shape))
    }

    /// Huber loss with unit threshold: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::SmoothL1(a), shape))
    }

    /// Numpy-style broadcast: trailing dims aligned, size-1 dims expanded.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if kernels::broadcast_strides(&self.node(a).shape, shape).is_none() {
            return Err(self.mismatch(
                "broadcast_to",
                &[a],
                format!("{:?} -> {:?}", self.node(a).shape, shape),
            ));
        }
        Ok(self.push(Op::BroadcastTo(a), shape.to_vec()))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let s = &self.node(a).shape;
        if axis >= s.len() || start + len > s[axis] {
            return Err(self.mismatch(
                "slice",
                &[a],
                format!("[{}..{}] on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let mut shape = s.clone();
        shape[axis] = len;
        Ok(self.push(Op::Slice { x: a, axis, start }, shape))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.mismatch("concat", parts, "no inputs".into()));
        }
        for p in parts {
            self.check(*p)?;
        }
        let first = self.node(parts[0]).shape.clone();
        if axis >= first.len() {
            return Err(self.mismatch("concat", parts, format!("axis {} of {:?}", axis, first)));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for p in parts {
            let s = &self.node(*p).shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", parts, format!("{:?} vs {:?}", first, s)));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if numel(&self.node(a).shape) != numel(shape) {
            return Err(self.mismatch(
                "reshape",
                &[a],
                format!("{:?} -> {:?}", self.node(a).shape, shape),
            ));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = &self.node(a).shape;
        if s.len() != 2 {
            return Err(self.mismatch("transpose", &[a], format!("{:?} is not 2-D", s)));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    /// Gradient reversal: identity forward, `-strength * upstream` backward.
    pub fn grl(&mut self, a: Var, strength: f64) -> Result<Var> {
        self.check(a)?;
        if !(strength > 0.0) || !strength.is_finite() {
            return Err(AutodiffError::InvalidReversalStrength(strength));
        }
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Grl(a, strength), shape))
    }

    /// Identity forward, blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Detach(a), shape))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        for v in inputs {
            self.check(*v)?;
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| &self.node(*v).shape[..]).collect();
        let shape = op
            .output_shape(&shapes)
            .map_err(|detail| self.mismatch(op.name(), inputs, detail))?;
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            shape,
        ))
    }

    // ----- evaluation ---------------------------------------------------

    /// Ancestors of `root` (inclusive) in topological order.
    pub fn topo_order(&mut self, root: Var) -> Result<Arc<[usize]>> {
        self.check(root)?;
        if let Some(order) = self.order_cache.get(&root.0) {
            return Ok(order.clone());
        }
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root.0];
        seen[root.0] = true;
        while let Some(i) = stack.pop() {
            for p in self.nodes[i].op.parents() {
                if !seen[p.0] {
                    seen[p.0] = true;
                    stack.push(p.0);
                }
            }
        }
        let order: Arc<[usize]> = seen
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect();
        self.order_cache.insert(root.0, order.clone());
        Ok(order)
    }

    /// Recompute every payload under `root` and return the root payload.
    pub fn eval_forward(&mut self, root: Var) -> Result<Tensor> {
        let order = self.topo_order(root)?;
        for &i in order.iter() {
            self.forward_node(i);
        }
        Ok(self.value(root))
    }

    fn forward_node(&mut self, i: usize) {
        let mut out = std::mem::take(&mut self.nodes[i].value);
        let mut aux = std::mem::take(&mut self.nodes[i].aux);
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value[..];
        let shp = |v: &Var| &nodes[v.0].shape[..];
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => kernels::zip_bcast(val(a), val(b), &mut out, |x, y| x + y),
            Op::Sub(a, b) => kernels::zip_bcast(val(a), val(b), &mut out, |x, y| x - y),
            Op::Mul(a, b) => kernels::zip_bcast(val(a), val(b), &mut out, |x, y| x * y),
            Op::Scale(a, c) => map_into(val(a), &mut out, |x| c * x),
            Op::AddScalar(a, c) => map_into(val(a), &mut out, |x| x + c),
            Op::Matmul(a, b) => {
                let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
                kernels::gemm(m, k, n, val(a), (k, 1), val(b), (n, 1), &mut out, 0.0);
            }
            Op::Conv2d { x, w, b, geom } => {
                aux.resize(geom.cols_len(), 0.0);
                kernels::im2col(geom, val(x), &mut aux);
                let bias = b.as_ref().map(|b| val(b));
                kernels::conv_forward(geom, &aux, val(w), bias, &mut out);
            }
            Op::LeakyRelu(a, alpha) => map_into(val(a), &mut out, |x| if x > 0.0 { x } else { alpha * x }),
            Op::Sigmoid(a) => map_into(val(a), &mut out, kernels::sigmoid),
            Op::Log(a) => map_into(val(a), &mut out, |x| x.clamp(LOG_CLAMP_MIN, LOG_CLAMP_MAX).ln()),
            Op::Exp(a) => map_into(val(a), &mut out, f64::exp),
            Op::SumAll(a) => out[0] = val(a).iter().sum(),
            Op::MeanAll(a) => {
                let v = val(a);
                out[0] = v.iter().sum::<f64>() / v.len() as f64;
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = kernels::split_axis(shp(a), *axis);
                out.fill(0.0);
                let v = val(a);
                for o in 0..outer {
                    for j in 0..n {
                        let src = &v[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SoftmaxXent(l, t) => {
                let c = shp(l)[1];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &val(l)[r * c..(r + 1) * c];
                    let tr = &val(t)[r * c..(r + 1) * c];
                    let lse = kernels::log_sum_exp(row);
                    *o = row.iter().zip(tr).map(|(z, p)| p * (lse - z)).sum();
                }
            }
            Op::SmoothL1(a) => map_into(val(a), &mut out, |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            }),
            Op::BroadcastTo(a) => {
                let strides = kernels::broadcast_strides(shp(a), &nodes[i].shape).unwrap();
                let src = val(a);
                kernels::for_each_broadcast(&nodes[i].shape, &strides, |o, s| out[o] = src[s]);
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = kernels::split_axis(shp(x), *axis);
                let len = nodes[i].shape[*axis];
                let src = val(x);
                for o in 0..outer {
                    let s0 = (o * n + start) * inner;
                    out[o * len * inner..(o + 1) * len * inner]
                        .copy_from_slice(&src[s0..s0 + len * inner]);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(&nodes[i].shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let n = shp(p)[*axis];
                    let src = val(p);
                    for o in 0..outer {
                        let d0 = (o * total + offset) * inner;
                        out[d0..d0 + n * inner]
                            .copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) | Op::Grl(a, _) | Op::Detach(a) => out.copy_from_slice(val(a)),
            Op::Transpose(a) => {
                let (r, c) = (shp(a)[0], shp(a)[1]);
                let src = val(a);
                for y in 0..r {
                    for x in 0..c {
                        out[x * r + y] = src[y * c + x];
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&[f64]> = inputs.iter().map(val).collect();
                op.forward(&ins, &mut out);
            }
        }
        self.nodes[i].value = out;
        self.nodes[i].aux = aux;
    }

    /// Reverse sweep from a scalar root. Every node's gradient is reset
    /// first, so leaves off the root's differentiable paths read as zero.
    /// Contributions along distinct paths accumulate additively.
    pub fn backprop(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if numel(&self.node(root).shape) != 1 {
            return Err(AutodiffError::NonScalarRoot {
                node: root.0,
                shape: self.node(root).shape.clone(),
            });
        }
        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad.clear();
                node.grad.resize(node.value.len(), 0.0);
            } else {
                node.grad.clear();
            }
        }
        if !self.node(root).requires_grad {
            return Ok(());
        }
        let order = self.topo_order(root)?;
        self.nodes[root.0].grad[0] = 1.0;
        for &i in order.iter().rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let up = std::mem::take(&mut self.nodes[i].grad);
            self.backward_node(i, &up);
            self.nodes[i].grad = up;
        }
        Ok(())
    }

    /// Take the parent's grad buffer out, let `f` add into it while reading
    /// any payloads, then put it back. No-op for parents without gradient.
    fn accumulate(&mut self, p: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        if !self.nodes[p.0].requires_grad {
            return;
        }
        let mut g = std::mem::take(&mut self.nodes[p.0].grad);
        f(&self.nodes, &mut g);
        self.nodes[p.0].grad = g;
    }

    fn backward_node(&mut self, i: usize, up: &[f64]) {
        // Moved out for the duration of the sweep so `accumulate` can borrow
        // the arena mutably; restored below.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |_, g| kernels::acc_bcast(g, up, |u, _| u));
                self.accumulate(*b, |_, g| kernels::acc_bcast(g, up, |u, _| u));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |_, g| kernels::acc_bcast(g, up, |u, _| u));
                self.accumulate(*b, |_, g| kernels::acc_bcast(g, up, |u, _| -u));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |n, g| {
                    let bv = &n[b.0].value;
                    kernels::acc_bcast(g, up, |u, k| u * bv[if bv.len() == 1 { 0 } else { k }])
                });
                self.accumulate(b, |n, g| {
                    let av = &n[a.0].value;
                    kernels::acc_bcast(g, up, |u, k| u * av[if av.len() == 1 { 0 } else { k }])
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, |_, g| add_map(g, up, |u, _| c * u));
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                self.accumulate(*a, |_, g| add_map(g, up, |u, _| u));
            }
            Op::Grl(a, lambda) => {
                let l = *lambda;
                self.accumulate(*a, |_, g| add_map(g, up, |u, _| -l * u));
            }
            Op::Detach(_) => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                // dA = up · Bᵀ
                self.accumulate(a, |nodes, g| {
                    kernels::gemm(m, n, k, up, (n, 1), &nodes[b.0].value, (1, n), g, 1.0)
                });
                // dB = Aᵀ · up
                self.accumulate(b, |nodes, g| {
                    kernels::gemm(k, m, n, &nodes[a.0].value, (1, k), up, (n, 1), g, 1.0)
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                self.accumulate(*w, |nodes, g| kernels::conv_backward_filters(&geom, &nodes[i].aux, up, g));
                if let Some(b) = b {
                    self.accumulate(*b, |_, g| kernels::conv_backward_bias(&geom, up, g));
                }
                let w = *w;
                self.accumulate(*x, |nodes, g| {
                    kernels::conv_backward_input(&geom, &nodes[w.0].value, up, g)
                });
            }
            Op::LeakyRelu(a, alpha) => {
                let (a, alpha) = (*a, *alpha);
                self.accumulate(a, |n, g| {
                    let x = &n[a.0].value;
                    add_map(g, up, |u, k| if x[k] > 0.0 { u } else { alpha * u })
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(*a, |n, g| {
                    let y = &n[i].value;
                    add_map(g, up, |u, k| u * y[k] * (1.0 - y[k]))
                });
            }
            Op::Log(a) => {
                let a = *a;
                self.accumulate(a, |n, g| {
                    let x = &n[a.0].value;
                    add_map(g, up, |u, k| {
                        if x[k] > LOG_CLAMP_MIN && x[k] <= LOG_CLAMP_MAX {
                            u / x[k]
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Exp(a) => {
                self.accumulate(*a, |n, g| {
                    let y = &n[i].value;
                    add_map(g, up, |u, k| u * y[k])
                });
            }
            Op::SumAll(a) => {
                let u = up[0];
                self.accumulate(*a, |_, g| g.iter_mut().for_each(|x| *x += u));
            }
            Op::MeanAll(a) => {
                let a = *a;
                let u = up[0] / self.nodes[a.0].value.len() as f64;
                self.accumulate(a, |_, g| g.iter_mut().for_each(|x| *x += u));
            }
            Op::SumAxis(a, axis) => {
                let a = *a;
                let (outer, n, inner) = kernels::split_axis(&self.nodes[a.0].shape, *axis);
                self.accumulate(a, |_, g| {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&up[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxXent(l, t) => {
                let (l, t) = (*l, *t);
                let c = self.nodes[l.0].shape[1];
                self.accumulate(l, |n, g| {
                    let (lv, tv) = (&n[l.0].value, &n[t.0].value);
                    for (r, u) in up.iter().enumerate() {
                        let row = &lv[r * c..(r + 1) * c];
                        let tr = &tv[r * c..(r + 1) * c];
                        let lse = kernels::log_sum_exp(row);
                        let mass: f64 = tr.iter().sum();
                        for j in 0..c {
                            g[r * c + j] += u * ((row[j] - lse).exp() * mass - tr[j]);
                        }
                    }
                });
                self.accumulate(t, |n, g| {
                    let lv = &n[l.0].value;
                    for (r, u) in up.iter().enumerate() {
                        let row = &lv[r * c..(r + 1) * c];
                        let lse = kernels::log_sum_exp(row);
                        for j in 0..c {
                            g[r * c + j] += u * (lse - row[j]);
                        }
                    }
                });
            }
            Op::SmoothL1(a) => {
                let a = *a;
                self.accumulate(a, |n, g| {
                    let x = &n[a.0].value;
                    add_map(g, up, |u, k| {
                        if x[k].abs() < 1.0 {
                            u * x[k]
                        } else {
                            u * x[k].signum()
                        }
                    })
                });
            }
            Op::BroadcastTo(a) => {
                let a = *a;
                let strides =
                    kernels::broadcast_strides(&self.nodes[a.0].shape, &self.nodes[i].shape).unwrap();
                let out_shape = self.nodes[i].shape.clone();
                self.accumulate(a, |_, g| {
                    kernels::for_each_broadcast(&out_shape, &strides, |o, s| g[s] += up[o])
                });
            }
            Op::Slice { x, axis, start } => {
                let x = *x;
                let (outer, n, inner) = kernels::split_axis(&self.nodes[x.0].shape, *axis);
                let len = self.nodes[i].shape[*axis];
                let start = *start;
                self.accumulate(x, |_, g| {
                    for o in 0..outer {
                        let s0 = (o * n + start) * inner;
                        let src = &up[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in g[s0..s0 + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let (outer, total, inner) = kernels::split_axis(&self.nodes[i].shape, axis);
                let mut offset = 0;
                for p in parts.iter() {
                    let n = self.nodes[p.0].shape[axis];
                    self.accumulate(*p, |_, g| {
                        for o in 0..outer {
                            let d0 = (o * total + offset) * inner;
                            let src = &up[d0..d0 + n * inner];
                            for (d, s) in g[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.accumulate(a, |_, g| {
                    for y in 0..r {
                        for x in 0..c {
                            g[y * c + x] += up[x * r + y];
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let grads = {
                    let ins: Vec<&[f64]> =
                        inputs.iter().map(|v| &self.nodes[v.0].value[..]).collect();
                    op.backward(&ins, &self.nodes[i].value, up)
                };
                for (v, gi) in inputs.iter().zip(grads) {
                    self.accumulate(*v, |_, g| add_map(g, &gi, |u, _| u));
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Fingerprint of every branch taken by non-smooth primitives under
    /// `root` in the last forward pass (leaky-ReLU side, smooth-L1 regime,
    /// log clamp). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&mut self, root: Var) -> Result<u64> {
        let order = self.topo_order(root)?;
        let mut h = DefaultHasher::new();
        for &i in order.iter() {
            let node = &self.nodes[i];
            let input = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::LeakyRelu(a, _) => {
                    for x in input(a) {
                        h.write_u8((*x > 0.0) as u8);
                    }
                }
                Op::SmoothL1(a) => {
                    for x in input(a) {
                        h.write_u8((x.abs() < 1.0) as u8);
                    }
                }
                Op::Log(a) => {
                    for x in input(a) {
                        h.write_u8((*x > LOG_CLAMP_MIN && *x <= LOG_CLAMP_MAX) as u8);
                    }
                }
                _ => {}
            }
        }
        Ok(h.finish())
    }
}

fn map_into(src: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64) {
    for (o, &x) in out.iter_mut().zip(src) {
        *o = f(x);
    }
}

fn add_map(g: &mut [f64], up: &[f64], f: impl Fn(f64, usize) -> f64) {
    for (k, (d, &u)) in g.iter_mut().zip(up).enumerate() {
        *d += f(u, k);
    }
}
