use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalization source.
#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running averages.
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, shape: Vec<usize> },
    Param { name: String },
    Const,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Abs,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    BatchNorm { eps: f64, mode: BatchNormMode },
    GlobalAvgPool,
    Linear,
    ScaleChannels,
    Concat,
    Upsample { height: usize, width: usize },
    Reshape(Vec<usize>),
    SliceCols { start: usize, end: usize },
    Sum,
    Mean,
    DiffX,
    DiffY,
    Charbonnier { eps: f64 },
    BceWithLogits,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear => "linear",
            Op::ScaleChannels => "scale_channels",
            Op::Concat => "concat",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::DiffX => "diff_x",
            Op::DiffY => "diff_y",
            Op::Charbonnier { .. } => "charbonnier",
            Op::BceWithLogits => "bce_with_logits",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Option<Tensor>,
    requires_grad: bool,
    stats: Option<BatchStats>,
}

/// A record of tensor operations in topological order.
///
/// Nodes are appended by the builder methods and evaluated lazily by
/// [`Graph::forward`], which computes every node that does not yet hold a
/// value. Nodes may be appended after a forward pass and evaluated by a later
/// one, which lets callers interleave graph construction with reading
/// intermediate values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    names: Vec<(String, NodeId)>,
}

impl Gradients {
    /// Gradient of `node`; zeros when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        self.grads[node.0].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[node.0].clone()))
    }

    /// Gradients for all named leaves (inputs and parameters).
    pub fn named(&self) -> HashMap<String, Tensor> {
        self.names.iter().map(|(name, id)| (name.clone(), self.get(*id))).collect()
    }
}

fn shape_err(node: usize, op: &Op, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        node,
        op: op.name(),
        detail: detail.into(),
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

    fn push(&mut self, op: Op, inputs: &[NodeId], value: Option<Tensor>, leaf_grad: bool) -> NodeId {
        let requires_grad = leaf_grad || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            stats: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Placeholder fed by name at forward time. Gradients flow to it.
    pub fn input(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
                shape: shape.into(),
            },
            &[],
            None,
            true,
        )
    }

    /// Trainable leaf holding a value.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Param { name: name.to_string() }, &[], Some(value), true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, &[], Some(value), false)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Op::Conv2d { stride, pad }, &ins, None, false)
    }

    /// Transposed convolution; `w` is `Cin×Cout×k×k`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Op::ConvTranspose2d { stride, pad }, &ins, None, false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, &[x], None, false)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, &[x], None, false)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, &[x], None, false)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp, &[x], None, false)
    }

    /// `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs, &[x], None, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b], None, false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, &[a, b], None, false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, &[a, b], None, false)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), &[x], None, false)
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f64) -> NodeId {
        self.push(Op::AddScalar(offset), &[x], None, false)
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mode: BatchNormMode) -> NodeId {
        self.push(Op::BatchNorm { eps, mode }, &[x, gamma, beta], None, false)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, &[x], None, false)
    }

    /// `x·wᵀ + b` with `x: N×F`, `w: O×F`, `b: O`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Op::Linear, &ins, None, false)
    }

    /// Multiplies each channel of an `N×C×H×W` map by the matching entry of an `N×C` gate.
    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        self.push(Op::ScaleChannels, &[x, gate], None, false)
    }

    /// Concatenates `N×C×H×W` maps along channels.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat, parts, None, false)
    }

    /// Corner-aligned bilinear upsampling to `height×width`.
    pub fn upsample(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        self.push(Op::Upsample { height, width }, &[x], None, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push(Op::Reshape(shape.into()), &[x], None, false)
    }

    /// Columns `start..end` of an `N×F` matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { start, end }, &[x], None, false)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, &[x], None, false)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, &[x], None, false)
    }

    /// Horizontal forward difference `x[.., v+1] - x[.., v]` on `N×C×H×W`.
    pub fn diff_x(&mut self, x: NodeId) -> NodeId {
        self.push(Op::DiffX, &[x], None, false)
    }

    /// Vertical forward difference `x[.., u+1, ..] - x[.., u, ..]`.
    pub fn diff_y(&mut self, x: NodeId) -> NodeId {
        self.push(Op::DiffY, &[x], None, false)
    }

    /// Elementwise `sqrt(x² + eps)`.
    pub fn charbonnier(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::Charbonnier { eps }, &[x], None, false)
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against `targets`.
    /// Gradient flows to the logits only.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::BceWithLogits, &[logits, targets], None, false)
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.nodes.get(node.0).and_then(|n| n.value.as_ref()).ok_or(TensorError::NotEvaluated(node.0))
    }

    /// Sign pattern of every evaluated ReLU and abs input. Two points with
    /// equal patterns lie on the same smooth piece of the graph's function.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu | Op::Abs) && n.value.is_some())
            .filter_map(|n| self.nodes[n.inputs[0].0].value.as_ref())
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, node: NodeId) -> Option<&BatchStats> {
        self.nodes.get(node.0).and_then(|n| n.stats.as_ref())
    }

    /// Evaluates every pending node in order. Placeholders are read from `feeds`.
    pub fn forward(&mut self, feeds: &HashMap<String, Tensor>) -> Result<()> {
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].value.is_some() {
                continue;
            }
            let (value, stats) = match &self.nodes[idx].op {
                Op::Input { name, shape } => {
                    let t = feeds.get(name).ok_or_else(|| TensorError::MissingInput(name.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(TensorError::InputShape {
                            name: name.clone(),
                            got: t.shape().to_vec(),
                            declared: shape.clone(),
                        });
                    }
                    (t.clone(), None)
                }
                _ => self.eval(idx)?,
            };
            if !value.is_finite() {
                return Err(TensorError::NonFinite {
                    node: idx,
                    op: self.nodes[idx].op.name(),
                });
            }
            self.nodes[idx].value = Some(value);
            self.nodes[idx].stats = stats;
        }
        Ok(())
    }

    fn input_value(&self, idx: usize, k: usize) -> Result<&Tensor> {
        let id = self.nodes[idx].inputs[k];
        self.value(id)
    }

    fn eval(&self, idx: usize) -> Result<(Tensor, Option<BatchStats>)> {
        let node = &self.nodes[idx];
        let op = &node.op;
        let x = |k: usize| self.input_value(idx, k);
        let out = match op {
            Op::Input { .. } | Op::Param { .. } | Op::Const => unreachable!("leaves hold values"),
            Op::Conv2d { stride, pad } => {
                let bias = if node.inputs.len() > 2 { Some(x(2)?) } else { None };
                conv2d_forward(idx, op, x(0)?, x(1)?, bias, *stride, *pad)?
            }
            Op::ConvTranspose2d { stride, pad } => {
                let bias = if node.inputs.len() > 2 { Some(x(2)?) } else { None };
                conv_t_forward(idx, op, x(0)?, x(1)?, bias, *stride, *pad)?
            }
            Op::Relu => x(0)?.map(|v| v.max(0.0)),
            Op::Tanh => x(0)?.map(f64::tanh),
            Op::Sigmoid => x(0)?.map(sigmoid),
            Op::Exp => x(0)?.map(f64::exp),
            Op::Abs => x(0)?.map(f64::abs),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (x(0)?, x(1)?);
                if a.shape() != b.shape() {
                    return Err(shape_err(idx, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |p, q| p + q,
                    Op::Sub => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(c) => x(0)?.map(|v| v * c),
            Op::AddScalar(c) => x(0)?.map(|v| v + c),
            Op::BatchNorm { eps, mode } => {
                return batch_norm_forward(idx, op, x(0)?, x(1)?, x(2)?, *eps, mode);
            }
            Op::GlobalAvgPool => {
                let t = x(0)?;
                let [n, c, h, w] = dims4(idx, op, t)?;
                let hw = h * w;
                let data = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                Tensor::new([n, c], data)?
            }
            Op::Linear => {
                let (t, w) = (x(0)?, x(1)?);
                let (n, f) = dims2(idx, op, t)?;
                let (o, fw) = dims2(idx, op, w)?;
                if f != fw {
                    return Err(shape_err(idx, op, format!("input width {f} vs weight width {fw}")));
                }
                let mut out = vec![0.0; n * o];
                if node.inputs.len() > 2 {
                    let b = x(2)?;
                    if b.numel() != o {
                        return Err(shape_err(idx, op, "bias length"));
                    }
                    for row in out.chunks_mut(o) {
                        row.copy_from_slice(b.data());
                    }
                }
                kernels::gemm(n, f, o, t.data(), false, w.data(), true, 1.0, &mut out);
                Tensor::new([n, o], out)?
            }
            Op::ScaleChannels => {
                let (t, g) = (x(0)?, x(1)?);
                let [n, c, h, w] = dims4(idx, op, t)?;
                if g.shape() != [n, c] {
                    return Err(shape_err(idx, op, format!("gate {:?} for map {:?}", g.shape(), t.shape())));
                }
                let hw = h * w;
                let mut data = t.data().to_vec();
                for (plane, &s) in data.chunks_mut(hw).zip(g.data()) {
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                Tensor::new(t.shape().to_vec(), data)?
            }
            Op::Concat => {
                let parts: Vec<&Tensor> = (0..node.inputs.len()).map(x).collect::<Result<_>>()?;
                let [n, _, h, w] = dims4(idx, op, parts[0])?;
                let mut total_c = 0;
                for p in &parts {
                    let [pn, pc, ph, pw] = dims4(idx, op, p)?;
                    if (pn, ph, pw) != (n, h, w) {
                        return Err(shape_err(idx, op, format!("{:?} vs {:?}", p.shape(), parts[0].shape())));
                    }
                    total_c += pc;
                }
                let mut data = Vec::with_capacity(n * total_c * h * w);
                for s in 0..n {
                    for p in &parts {
                        let per = p.numel() / n;
                        data.extend_from_slice(&p.data()[s * per..(s + 1) * per]);
                    }
                }
                Tensor::new([n, total_c, h, w], data)?
            }
            Op::Upsample { height, width } => {
                let t = x(0)?;
                let [n, c, h, w] = dims4(idx, op, t)?;
                if *height < h || *width < w {
                    return Err(shape_err(idx, op, format!("target {height}×{width} smaller than source {h}×{w}")));
                }
                let mut out = vec![0.0; n * c * height * width];
                for (src, dst) in t.data().chunks(h * w).zip(out.chunks_mut(height * width)) {
                    kernels::bilinear_plane(src, h, w, *height, *width, dst);
                }
                Tensor::new([n, c, *height, *width], out)?
            }
            Op::Reshape(shape) => {
                let t = x(0)?;
                t.clone()
                    .reshape(shape.clone())
                    .map_err(|_| shape_err(idx, op, format!("{:?} -> {:?}", t.shape(), shape)))?
            }
            Op::SliceCols { start, end } => {
                let t = x(0)?;
                let (n, f) = dims2(idx, op, t)?;
                if start >= end || *end > f {
                    return Err(shape_err(idx, op, format!("columns {start}..{end} of {f}")));
                }
                let mut data = Vec::with_capacity(n * (end - start));
                for row in t.data().chunks(f) {
                    data.extend_from_slice(&row[*start..*end]);
                }
                Tensor::new([n, end - start], data)?
            }
            Op::Sum => Tensor::scalar(x(0)?.sum()),
            Op::Mean => {
                let t = x(0)?;
                if t.numel() == 0 {
                    return Err(shape_err(idx, op, "mean of empty tensor"));
                }
                Tensor::scalar(t.mean())
            }
            Op::DiffX | Op::DiffY => {
                let t = x(0)?;
                let [n, c, h, w] = dims4(idx, op, t)?;
                let horizontal = matches!(op, Op::DiffX);
                if (horizontal && w < 2) || (!horizontal && h < 2) {
                    return Err(shape_err(idx, op, format!("degenerate map {h}×{w}")));
                }
                let (oh, ow) = if horizontal { (h, w - 1) } else { (h - 1, w) };
                let mut out = Vec::with_capacity(n * c * oh * ow);
                for plane in t.data().chunks(h * w) {
                    for u in 0..oh {
                        for v in 0..ow {
                            let a = plane[u * w + v];
                            let b = if horizontal { plane[u * w + v + 1] } else { plane[(u + 1) * w + v] };
                            out.push(b - a);
                        }
                    }
                }
                Tensor::new([n, c, oh, ow], out)?
            }
            Op::Charbonnier { eps } => x(0)?.map(|v| (v * v + eps).sqrt()),
            Op::BceWithLogits => {
                let (z, t) = (x(0)?, x(1)?);
                if z.shape() != t.shape() {
                    return Err(shape_err(idx, op, format!("{:?} vs {:?}", z.shape(), t.shape())));
                }
                let data = z
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                    .collect();
                Tensor::new(z.shape().to_vec(), data)?
            }
        };
        Ok((out, None))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_val = self.value(loss)?;
        if loss_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                node: loss.0,
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            match (&n.value, &n.op) {
                (Some(v), _) => shapes.push(v.shape().to_vec()),
                (None, Op::Input { shape, .. }) => shapes.push(shape.clone()),
                (None, _) if i > loss.0 => shapes.push(Vec::new()),
                (None, _) => return Err(TensorError::NotEvaluated(i)),
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_val.shape().to_vec(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let wants: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            if wants.iter().any(|&w| w) {
                let contribs = self.local_backward(idx, &g, &wants)?;
                for (k, c) in contribs.into_iter().enumerate() {
                    let Some(c) = c else { continue };
                    if !wants[k] {
                        continue;
                    }
                    let target = node.inputs[k].0;
                    match &mut grads[target] {
                        Some(acc) => acc.axpy(1.0, &c)?,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let names = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Input { name, .. } | Op::Param { name } => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes, names })
    }

    /// Vector-Jacobian products of one node for each wanted input.
    fn local_backward(&self, idx: usize, g: &Tensor, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[idx];
        let op = &node.op;
        let x = |k: usize| self.input_value(idx, k);
        let y = node.value.as_ref().ok_or(TensorError::NotEvaluated(idx))?;
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Result<Vec<Option<Tensor>>> {
            let data = (0..g.numel()).map(|i| g.data()[i] * f(i)).collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        };
        match op {
            Op::Input { .. } | Op::Param { .. } | Op::Const => Ok(vec![]),
            Op::Conv2d { stride, pad } => conv2d_backward(x(0)?, x(1)?, g, *stride, *pad, wants),
            Op::ConvTranspose2d { stride, pad } => conv_t_backward(x(0)?, x(1)?, g, *stride, *pad, wants),
            Op::Relu => {
                let xin = x(0)?;
                elementwise(&|i| if xin.data()[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Tanh => elementwise(&|i| 1.0 - y.data()[i] * y.data()[i]),
            Op::Sigmoid => elementwise(&|i| y.data()[i] * (1.0 - y.data()[i])),
            Op::Exp => elementwise(&|i| y.data()[i]),
            Op::Abs => {
                let xin = x(0)?;
                elementwise(&|i| {
                    let v = xin.data()[i];
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => Ok(vec![Some(g.clone()), Some(g.map(|v| -v))]),
            Op::Mul => {
                let (a, b) = (x(0)?, x(1)?);
                let ga = wants[0].then(|| hadamard(g, b));
                let gb = wants[1].then(|| hadamard(g, a));
                Ok(vec![ga, gb])
            }
            Op::Scale(c) => Ok(vec![Some(g.map(|v| v * c))]),
            Op::AddScalar(_) => Ok(vec![Some(g.clone())]),
            Op::BatchNorm { eps, mode } => batch_norm_backward(idx, op, x(0)?, x(1)?, g, *eps, mode),
            Op::GlobalAvgPool => {
                let xin = x(0)?;
                let [_, _, h, w] = dims4(idx, op, xin)?;
                let hw = h * w;
                let mut data = Vec::with_capacity(xin.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                Ok(vec![Some(Tensor::new(xin.shape().to_vec(), data)?)])
            }
            Op::Linear => {
                let (t, w) = (x(0)?, x(1)?);
                let (n, f) = dims2(idx, op, t)?;
                let o = w.shape()[0];
                let gx = wants[0].then(|| {
                    let mut d = vec![0.0; n * f];
                    kernels::gemm(n, o, f, g.data(), false, w.data(), false, 0.0, &mut d);
                    Tensor::new([n, f], d)
                });
                let gw = wants[1].then(|| {
                    let mut d = vec![0.0; o * f];
                    kernels::gemm(o, n, f, g.data(), true, t.data(), false, 0.0, &mut d);
                    Tensor::new([o, f], d)
                });
                let mut out = vec![gx.transpose()?, gw.transpose()?];
                if node.inputs.len() > 2 {
                    out.push(wants[2].then(|| {
                        let mut d = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        Tensor::new([o], d).expect("bias shape")
                    }));
                }
                Ok(out)
            }
            Op::ScaleChannels => {
                let (t, gate) = (x(0)?, x(1)?);
                let [_, _, h, w] = dims4(idx, op, t)?;
                let hw = h * w;
                let gx = wants[0].then(|| {
                    let mut d = g.data().to_vec();
                    for (plane, &s) in d.chunks_mut(hw).zip(gate.data()) {
                        plane.iter_mut().for_each(|v| *v *= s);
                    }
                    Tensor::new(t.shape().to_vec(), d).expect("same shape")
                });
                let gg = wants[1].then(|| {
                    let d = g
                        .data()
                        .chunks(hw)
                        .zip(t.data().chunks(hw))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    Tensor::new(gate.shape().to_vec(), d).expect("gate shape")
                });
                Ok(vec![gx, gg])
            }
            Op::Concat => {
                let n = g.shape()[0];
                let per_out = g.numel() / n;
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for (k, want) in wants.iter().enumerate() {
                    let p = x(k)?;
                    let per = p.numel() / n;
                    if *want {
                        let mut d = Vec::with_capacity(p.numel());
                        for s in 0..n {
                            let base = s * per_out + offset;
                            d.extend_from_slice(&g.data()[base..base + per]);
                        }
                        out.push(Some(Tensor::new(p.shape().to_vec(), d)?));
                    } else {
                        out.push(None);
                    }
                    offset += per;
                }
                Ok(out)
            }
            Op::Upsample { height, width } => {
                let t = x(0)?;
                let [_, _, h, w] = dims4(idx, op, t)?;
                let mut d = vec![0.0; t.numel()];
                for (go, gx) in g.data().chunks(height * width).zip(d.chunks_mut(h * w)) {
                    kernels::bilinear_plane_adjoint(go, h, w, *height, *width, gx);
                }
                Ok(vec![Some(Tensor::new(t.shape().to_vec(), d)?)])
            }
            Op::Reshape(_) => Ok(vec![Some(g.clone().reshape(x(0)?.shape().to_vec())?)]),
            Op::SliceCols { start, end } => {
                let t = x(0)?;
                let (_, f) = dims2(idx, op, t)?;
                let width = end - start;
                let mut d = vec![0.0; t.numel()];
                for (row, grow) in d.chunks_mut(f).zip(g.data().chunks(width)) {
                    row[*start..*end].copy_from_slice(grow);
                }
                Ok(vec![Some(Tensor::new(t.shape().to_vec(), d)?)])
            }
            Op::Sum => Ok(vec![Some(Tensor::full(x(0)?.shape().to_vec(), g.item()))]),
            Op::Mean => {
                let t = x(0)?;
                Ok(vec![Some(Tensor::full(t.shape().to_vec(), g.item() / t.numel() as f64))])
            }
            Op::DiffX | Op::DiffY => {
                let t = x(0)?;
                let [_, _, h, w] = dims4(idx, op, t)?;
                let horizontal = matches!(op, Op::DiffX);
                let (oh, ow) = if horizontal { (h, w - 1) } else { (h - 1, w) };
                let mut d = vec![0.0; t.numel()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for u in 0..oh {
                        for v in 0..ow {
                            let gv = gp[u * ow + v];
                            plane[u * w + v] -= gv;
                            if horizontal {
                                plane[u * w + v + 1] += gv;
                            } else {
                                plane[(u + 1) * w + v] += gv;
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(t.shape().to_vec(), d)?)])
            }
            Op::Charbonnier { .. } => {
                let xin = x(0)?;
                elementwise(&|i| xin.data()[i] / y.data()[i])
            }
            Op::BceWithLogits => {
                let (z, t) = (x(0)?, x(1)?);
                let gz = elementwise(&|i| sigmoid(z.data()[i]) - t.data()[i])?;
                Ok(vec![gz.into_iter().next().flatten(), None])
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn dims4(idx: usize, op: &Op, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(shape_err(idx, op, format!("expected N×C×H×W, got {s:?}"))),
    }
}

fn dims2(idx: usize, op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, f] => Ok((n, f)),
        s => Err(shape_err(idx, op, format!("expected N×F, got {s:?}"))),
    }
}

fn check_bias(idx: usize, op: &Op, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => Err(shape_err(idx, op, format!("bias length {} for {channels} channels", b.numel()))),
        _ => Ok(()),
    }
}

fn conv2d_forward(idx: usize, op: &Op, x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = dims4(idx, op, x)?;
    let [co, ci, k, k2] = dims4(idx, op, w)?;
    if ci != c || k != k2 {
        return Err(shape_err(idx, op, format!("weight {:?} for input {:?}", w.shape(), x.shape())));
    }
    check_bias(idx, op, bias, co)?;
    let geom = ConvGeom::forward(c, h, wd, k, stride, pad).ok_or_else(|| shape_err(idx, op, "kernel larger than padded input"))?;
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * co * cols];
    for (xs, os) in x.data().chunks(c * h * wd).zip(out.chunks_mut(co * cols)) {
        kernels::im2col(xs, &geom, &mut col);
        if let Some(b) = bias {
            for (plane, &bv) in os.chunks_mut(cols).zip(b.data()) {
                plane.fill(bv);
            }
        }
        kernels::gemm(co, rows, cols, w.data(), false, &col, false, 1.0, os);
    }
    Tensor::new([n, co, geom.out_h, geom.out_w], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let geom = ConvGeom::forward(c, h, wd, k, stride, pad).expect("validated in forward");
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut gx = wants[0].then(|| vec![0.0; x.numel()]);
    let mut gw = wants[1].then(|| vec![0.0; w.numel()]);
    for s in 0..n {
        let gs = &g.data()[s * co * cols..(s + 1) * co * cols];
        if let Some(gw) = gw.as_mut() {
            kernels::im2col(&x.data()[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut col);
            kernels::gemm(co, cols, rows, gs, false, &col, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            kernels::gemm(rows, co, cols, w.data(), true, gs, false, 0.0, &mut col);
            kernels::col2im(&col, &geom, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
        }
    }
    let mut out = vec![
        gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        gw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
    ];
    if wants.len() > 2 {
        out.push(wants[2].then(|| channel_sums(g, co)));
    }
    Ok(out)
}

fn channel_sums(g: &Tensor, channels: usize) -> Tensor {
    let plane = g.numel() / (g.shape()[0] * channels);
    let mut d = vec![0.0; channels];
    for (i, p) in g.data().chunks(plane).enumerate() {
        d[i % channels] += p.iter().sum::<f64>();
    }
    Tensor::new([channels], d).expect("bias shape")
}

/// Geometry of the adjoint convolution that maps the transposed-conv output back to its input.
fn conv_t_geom(cout: usize, hin: usize, win: usize, k: usize, stride: usize, pad: usize) -> Option<ConvGeom> {
    let oh = ((hin - 1) * stride + k).checked_sub(2 * pad)?;
    let ow = ((win - 1) * stride + k).checked_sub(2 * pad)?;
    let geom = ConvGeom::forward(cout, oh, ow, k, stride, pad)?;
    (geom.out_h == hin && geom.out_w == win).then_some(geom)
}

fn conv_t_forward(idx: usize, op: &Op, x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, ci, h, wd] = dims4(idx, op, x)?;
    let [wi, co, k, k2] = dims4(idx, op, w)?;
    if wi != ci || k != k2 {
        return Err(shape_err(idx, op, format!("weight {:?} for input {:?}", w.shape(), x.shape())));
    }
    check_bias(idx, op, bias, co)?;
    let geom = conv_t_geom(co, h, wd, k, stride, pad).ok_or_else(|| shape_err(idx, op, "inconsistent transposed-conv geometry"))?;
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let plane = geom.height * geom.width;
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * co * plane];
    for (xs, os) in x.data().chunks(ci * h * wd).zip(out.chunks_mut(co * plane)) {
        kernels::gemm(rows, ci, cols, w.data(), true, xs, false, 0.0, &mut col);
        if let Some(b) = bias {
            for (p, &bv) in os.chunks_mut(plane).zip(b.data()) {
                p.fill(bv);
            }
        }
        kernels::col2im(&col, &geom, os);
    }
    Tensor::new([n, co, geom.height, geom.width], out)
}

fn conv_t_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize, wants: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let geom = conv_t_geom(co, h, wd, k, stride, pad).expect("validated in forward");
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let plane = geom.height * geom.width;
    let mut col = vec![0.0; rows * cols];
    let mut gx = wants[0].then(|| vec![0.0; x.numel()]);
    let mut gw = wants[1].then(|| vec![0.0; w.numel()]);
    for s in 0..n {
        kernels::im2col(&g.data()[s * co * plane..(s + 1) * co * plane], &geom, &mut col);
        if let Some(gx) = gx.as_mut() {
            kernels::gemm(ci, rows, cols, w.data(), false, &col, false, 0.0, &mut gx[s * ci * cols..(s + 1) * ci * cols]);
        }
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[s * ci * cols..(s + 1) * ci * cols];
            kernels::gemm(ci, cols, rows, xs, false, &col, true, 1.0, gw);
        }
    }
    let mut out = vec![
        gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        gw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
    ];
    if wants.len() > 2 {
        out.push(wants[2].then(|| channel_sums(g, co)));
    }
    Ok(out)
}

/// Per-channel `(mean, 1/sqrt(var+eps))` used to normalize, plus observed batch stats.
fn bn_norm_params(x: &Tensor, eps: f64, mode: &BatchNormMode) -> (Vec<f64>, Vec<f64>, Option<BatchStats>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.numel() / (n * c);
    match mode {
        BatchNormMode::Eval { mean, var } => {
            let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean.clone(), inv, None)
        }
        BatchNormMode::Train => {
            let m = (n * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut sq = vec![0.0; c];
            for (i, p) in x.data().chunks(hw).enumerate() {
                mean[i % c] += p.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for (i, p) in x.data().chunks(hw).enumerate() {
                let mu = mean[i % c];
                sq[i % c] += p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            let inv = sq.iter().map(|s| 1.0 / (s / m + eps).sqrt()).collect();
            let unbiased = sq.iter().map(|s| if m > 1.0 { s / (m - 1.0) } else { 0.0 }).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, inv, Some(stats))
        }
    }
}

fn batch_norm_forward(idx: usize, op: &Op, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, mode: &BatchNormMode) -> Result<(Tensor, Option<BatchStats>)> {
    let [_, c, h, w] = dims4(idx, op, x)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err(idx, op, format!("affine params for {c} channels")));
    }
    if let BatchNormMode::Eval { mean, var } = mode {
        if mean.len() != c || var.len() != c {
            return Err(shape_err(idx, op, format!("running stats for {c} channels")));
        }
    }
    let (mean, inv, stats) = bn_norm_params(x, eps, mode);
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (i, p) in out.chunks_mut(hw).enumerate() {
        let ch = i % c;
        let (mu, s, gm, bt) = (mean[ch], inv[ch], gamma.data()[ch], beta.data()[ch]);
        p.iter_mut().for_each(|v| *v = gm * (*v - mu) * s + bt);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

fn batch_norm_backward(idx: usize, op: &Op, x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64, mode: &BatchNormMode) -> Result<Vec<Option<Tensor>>> {
    let [n, c, h, w] = dims4(idx, op, x)?;
    let hw = h * w;
    let (mean, inv, _) = bn_norm_params(x, eps, mode);
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (i, (xp, gp)) in x.data().chunks(hw).zip(g.data().chunks(hw)).enumerate() {
        let ch = i % c;
        for (&xv, &gv) in xp.iter().zip(gp) {
            sum_g[ch] += gv;
            sum_gx[ch] += gv * (xv - mean[ch]) * inv[ch];
        }
    }
    let mut gx = vec![0.0; x.numel()];
    let m = (n * hw) as f64;
    let train = matches!(mode, BatchNormMode::Train);
    for (i, ((xp, gp), dp)) in x.data().chunks(hw).zip(g.data().chunks(hw)).zip(gx.chunks_mut(hw)).enumerate() {
        let ch = i % c;
        let scale = gamma.data()[ch] * inv[ch];
        for ((&xv, &gv), d) in xp.iter().zip(gp).zip(dp.iter_mut()) {
            *d = if train {
                let xhat = (xv - mean[ch]) * inv[ch];
                scale * (gv - sum_g[ch] / m - xhat * sum_gx[ch] / m)
            } else {
                scale * gv
            };
        }
    }
    Ok(vec![
        Some(Tensor::new(x.shape().to_vec(), gx)?),
        Some(Tensor::new([c], sum_gx)?),
        Some(Tensor::new([c], sum_g)?),
    ])
}
