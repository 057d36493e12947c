use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Value written into causally masked attention scores. Finite so that every
/// node value stays finite; `exp` of it relative to any real row max is 0.
pub const MASK_VALUE: f64 = -1.0e30;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Elementwise sum; either operand may be a one-element tensor.
    Add,
    Sub,
    Mul,
    /// `[m, k] x [k, n] -> [m, n]`.
    Matmul,
    Exp,
    /// Natural log; input must be strictly positive.
    Log,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Abs,
    /// `min(x, c)`; the gradient on the clamped branch (including `x == c`) is 0.
    ClampMax(f64),
    Scale(f64),
    /// Mean of all elements, producing a scalar.
    Mean,
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Flat-index gather: `out[k] = x.data[idx[k]]`, shape `[idx.len()]`.
    Gather(Vec<usize>),
    LogSoftmax(usize),
    Transpose,
    Reshape(Vec<usize>),
    /// Fills entries above the diagonal of a square matrix with [`MASK_VALUE`].
    CausalMask,
    /// Identity forward, no gradient.
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::LogSigmoid => "log_sigmoid",
            Op::Tanh => "tanh",
            Op::Abs => "abs",
            Op::ClampMax(_) => "clamp_max",
            Op::Scale(_) => "scale",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Gather(_) => "gather",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::CausalMask => "causal_mask",
            Op::Detach => "detach",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Matmul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Define-by-run computation graph. Node ids are assigned in creation order, so
/// every node's inputs precede it and the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        ))
    }
}

fn binary_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

fn unary_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(
            "matmul",
            format!("cannot multiply {sa:?} by {sb:?}"),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Splits a rank-1 or rank-2 tensor into (outer, len, stride) lanes along `axis`.
fn softmax_lanes(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    match (shape.len(), axis) {
        (1, 0) => Ok((1, shape[0], 1)),
        (2, 0) => Ok((shape[1], shape[0], shape[1])),
        (2, 1) => Ok((shape[0], shape[1], 1)),
        _ => Err(Error::shape(
            op,
            format!("axis {axis} unsupported for shape {shape:?}"),
        )),
    }
}

fn lane_offset(shape: &[usize], axis: usize, lane: usize) -> usize {
    if shape.len() == 2 && axis == 1 {
        lane * shape[1]
    } else {
        lane
    }
}

fn log_softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (lanes, len, stride) = softmax_lanes("log_softmax", x.shape(), axis)?;
    if len == 0 {
        return Err(Error::shape("log_softmax", "empty axis"));
    }
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for lane in 0..lanes {
        let base = lane_offset(x.shape(), axis, lane);
        let max = (0..len)
            .map(|i| xd[base + i * stride])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..len)
                .map(|i| (xd[base + i * stride] - max).exp())
                .sum::<f64>()
                .ln();
        for i in 0..len {
            out[base + i * stride] = xd[base + i * stride] - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Adds an upstream gradient into an operand that may have been broadcast.
fn add_broadcast(dst: &mut [f64], upstream: &[f64], scale: impl Fn(usize) -> f64) {
    if dst.len() == upstream.len() {
        for (i, (d, g)) in dst.iter_mut().zip(upstream).enumerate() {
            *d += g * scale(i);
        }
    } else {
        let s: f64 = upstream.iter().enumerate().map(|(i, g)| g * scale(i)).sum();
        dst[0] += s;
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

    /// Adds a leaf; it participates in differentiation iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: tensor,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last `backward` root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Input ids of a node, in operand order.
    pub fn inputs(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].inputs
    }

    /// Applies `op` to `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::shape(
                op.name(),
                format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        let value = {
            let x = &self.nodes[inputs[0].0].value;
            match &op {
                Op::Add | Op::Sub | Op::Mul => {
                    let y = &self.nodes[inputs[1].0].value;
                    let shape = broadcast_shape(op.name(), x, y)?;
                    match op {
                        Op::Add => binary_map(x, y, shape, |a, b| a + b),
                        Op::Sub => binary_map(x, y, shape, |a, b| a - b),
                        _ => binary_map(x, y, shape, |a, b| a * b),
                    }
                }
                Op::Matmul => matmul_forward(x, &self.nodes[inputs[1].0].value)?,
                Op::Exp => unary_map(x, f64::exp),
                Op::Log => {
                    if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                        return Err(Error::domain("log", format!("non-positive input {bad}")));
                    }
                    unary_map(x, f64::ln)
                }
                Op::Sigmoid => unary_map(x, stable_sigmoid),
                Op::LogSigmoid => unary_map(x, stable_log_sigmoid),
                Op::Tanh => unary_map(x, f64::tanh),
                Op::Abs => unary_map(x, f64::abs),
                Op::ClampMax(c) => {
                    let c = *c;
                    unary_map(x, |v| if v < c { v } else { c })
                }
                Op::Scale(c) => {
                    let c = *c;
                    unary_map(x, |v| v * c)
                }
                Op::Mean => {
                    if x.numel() == 0 {
                        return Err(Error::shape("mean", "empty tensor"));
                    }
                    Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
                }
                Op::Sum => Tensor::scalar(x.data().iter().sum()),
                Op::Gather(idx) => {
                    let xd = x.data();
                    if let Some(&bad) = idx.iter().find(|&&i| i >= xd.len()) {
                        return Err(Error::shape(
                            "gather",
                            format!("index {bad} out of range for {:?}", x.shape()),
                        ));
                    }
                    Tensor::vector(idx.iter().map(|&i| xd[i]).collect())
                }
                Op::LogSoftmax(axis) => log_softmax_forward(x, *axis)?,
                Op::Transpose => {
                    let s = x.shape();
                    if s.len() != 2 {
                        return Err(Error::shape(
                            "transpose",
                            format!("rank-2 required, got {s:?}"),
                        ));
                    }
                    Tensor::new(vec![s[1], s[0]], transpose_data(x.data(), s[0], s[1]))?
                }
                Op::Reshape(shape) => {
                    Tensor::new(shape.clone(), x.data().to_vec()).map_err(|_| {
                        Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape()))
                    })?
                }
                Op::CausalMask => {
                    let s = x.shape();
                    if s.len() != 2 || s[0] != s[1] {
                        return Err(Error::shape(
                            "causal_mask",
                            format!("square matrix required, got {s:?}"),
                        ));
                    }
                    let n = s[0];
                    let mut d = x.data().to_vec();
                    for i in 0..n {
                        for v in &mut d[i * n + i + 1..(i + 1) * n] {
                            *v = MASK_VALUE;
                        }
                    }
                    Tensor::new(vec![n, n], d)?
                }
                Op::Detach => x.clone().with_requires_grad(false),
            }
        };
        let requires_grad = !matches!(op, Op::Detach)
            && inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value: value.with_requires_grad(requires_grad),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Result<Var> {
        self.apply(Op::ClampMax(cap), &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Scale(-1.0), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather(indices), &[a])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax(axis), &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape(shape), &[a])
    }
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::CausalMask, &[a])
    }
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Detach, &[a])
    }

    /// Adds `c` to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// Sums a list of scalar nodes left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all on empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from a scalar root. Leaf gradients are overwritten, not
    /// accumulated across calls; within one call, every use of a node adds in.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rshape = self.nodes[root.0].value.shape();
        if !rshape.is_empty() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {rshape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(op) = &node.op else {
                grads[id] = Some(g);
                continue;
            };
            self.backprop_node(op, &node.inputs, &node.value, &g, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[id];
                if node.op.is_none() && node.value.requires_grad() {
                    node.value.set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        op: &Op,
        inputs: &[usize],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let input = |k: usize| &self.nodes[inputs[k]].value;
        let wants = |k: usize| self.nodes[inputs[k]].value.requires_grad();
        match op {
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let bcast = |t: &Tensor, i: usize| {
                    if t.numel() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                if wants(0) {
                    accumulate(&mut grads[inputs[0]], a.numel(), |d| match op {
                        Op::Mul => add_broadcast(d, g, |i| bcast(b, i)),
                        _ => add_broadcast(d, g, |_| 1.0),
                    });
                }
                if wants(1) {
                    accumulate(&mut grads[inputs[1]], b.numel(), |d| match op {
                        Op::Mul => add_broadcast(d, g, |i| bcast(a, i)),
                        Op::Sub => add_broadcast(d, g, |_| -1.0),
                        _ => add_broadcast(d, g, |_| 1.0),
                    });
                }
            }
            Op::Matmul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (ad, bd) = (a.data(), b.data());
                if wants(0) {
                    accumulate(&mut grads[inputs[0]], m * k, |d| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                d[i * k + p] += s;
                            }
                        }
                    });
                }
                if wants(1) {
                    accumulate(&mut grads[inputs[1]], k * n, |d| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (dv, gv) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *dv += aip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Exp
            | Op::Log
            | Op::Sigmoid
            | Op::LogSigmoid
            | Op::Tanh
            | Op::Abs
            | Op::ClampMax(_)
            | Op::Scale(_) => {
                if !wants(0) {
                    return;
                }
                let x = input(0).data();
                let y = out.data();
                let local = |i: usize| -> f64 {
                    match op {
                        Op::Exp => y[i],
                        Op::Log => 1.0 / x[i],
                        Op::Sigmoid => y[i] * (1.0 - y[i]),
                        Op::LogSigmoid => stable_sigmoid(-x[i]),
                        Op::Tanh => 1.0 - y[i] * y[i],
                        Op::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Op::ClampMax(c) => {
                            if x[i] < *c {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Scale(c) => *c,
                        _ => unreachable!(),
                    }
                };
                accumulate(&mut grads[inputs[0]], x.len(), |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i] * local(i);
                    }
                });
            }
            Op::Mean | Op::Sum => {
                if !wants(0) {
                    return;
                }
                let n = input(0).numel();
                let each = if matches!(op, Op::Mean) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                accumulate(&mut grads[inputs[0]], n, |d| {
                    for dv in d.iter_mut() {
                        *dv += each;
                    }
                });
            }
            Op::Gather(idx) => {
                if !wants(0) {
                    return;
                }
                accumulate(&mut grads[inputs[0]], input(0).numel(), |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += g[k];
                    }
                });
            }
            Op::LogSoftmax(axis) => {
                if !wants(0) {
                    return;
                }
                let shape = out.shape();
                let (lanes, len, stride) =
                    softmax_lanes("log_softmax", shape, *axis).expect("checked in forward");
                let y = out.data();
                accumulate(&mut grads[inputs[0]], y.len(), |d| {
                    for lane in 0..lanes {
                        let base = lane_offset(shape, *axis, lane);
                        let gsum: f64 = (0..len).map(|i| g[base + i * stride]).sum();
                        for i in 0..len {
                            let at = base + i * stride;
                            d[at] += g[at] - y[at].exp() * gsum;
                        }
                    }
                });
            }
            Op::Transpose => {
                if !wants(0) {
                    return;
                }
                let s = out.shape();
                let gt = transpose_data(g, s[0], s[1]);
                accumulate(&mut grads[inputs[0]], gt.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(&gt) {
                        *dv += gv;
                    }
                });
            }
            Op::Reshape(_) => {
                if !wants(0) {
                    return;
                }
                accumulate(&mut grads[inputs[0]], g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            Op::CausalMask => {
                if !wants(0) {
                    return;
                }
                let n = out.shape()[0];
                accumulate(&mut grads[inputs[0]], g.len(), |d| {
                    for i in 0..n {
                        for j in 0..=i {
                            d[i * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Detach => {}
        }
    }
}
