//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op checks operand shapes
//! before it runs and evaluates eagerly, so node order is a topological order.
//! [`Graph::backward`] walks that order in reverse, summing contributions into
//! each operand sequentially; results are bit-reproducible.

use std::collections::BTreeMap;

use num_traits::Float;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId, f32),
    Relu(NodeId),
    Square(NodeId),
    ChannelAffine {
        input: NodeId,
        scale: NodeId,
        offset: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
        channels: usize,
    },
    LinearNoBias {
        input: NodeId,
        weights: NodeId,
    },
    Cosine(NodeId, NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::LinearNoBias { .. } => "linear_no_bias",
            Op::Cosine(..) => "cosine_similarity",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Cosine(a, b) | Op::Dot(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::AddScalar(a, _) | Op::Relu(a) | Op::Square(a) | Op::Sum(a) => vec![a],
            Op::GlobalAvgPool { input, .. } => vec![input],
            Op::ChannelAffine { input, scale, offset } => vec![input, scale, offset],
            Op::LinearNoBias { input, weights } => vec![input, weights],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    differentiable: bool,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient of a scalar output with respect to every differentiable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, differentiable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            differentiable,
            requires_grad: differentiable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_error(&self, op: &Op, detail: String) -> Error {
        Error::Shape(format!("node #{} ({}): {detail}", self.nodes.len(), op.name()))
    }

    /// Static shape inference; runs before any value is computed.
    fn infer_shape(&self, op: &Op) -> Result<Vec<usize>> {
        let s = |id: NodeId| self.shape(id);
        let same = |a: NodeId, b: NodeId| -> Result<Vec<usize>> {
            if s(a) == s(b) {
                Ok(s(a).to_vec())
            } else {
                Err(self.shape_error(op, format!("operand shapes {:?} and {:?} differ", s(a), s(b))))
            }
        };
        match *op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Conv2d { geom, .. } => Ok(vec![geom.c_out, geom.oh, geom.ow]),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => same(a, b),
            Op::Scale(a, _) | Op::AddScalar(a, _) | Op::Relu(a) | Op::Square(a) => Ok(s(a).to_vec()),
            Op::ChannelAffine { input, scale, offset } => match s(input) {
                &[c, _, _] if s(scale) == [c] && s(offset) == [c] => Ok(s(input).to_vec()),
                _ => Err(self.shape_error(
                    op,
                    format!(
                        "input {:?} needs per-channel scale/offset, got {:?} and {:?}",
                        s(input),
                        s(scale),
                        s(offset)
                    ),
                )),
            },
            Op::GlobalAvgPool { input, channels } => match *s(input) {
                [c, _, _] if c == channels => Ok(vec![c]),
                _ => Err(self.shape_error(op, format!("expected [C, H, W], got {:?}", s(input)))),
            },
            Op::LinearNoBias { input, weights } => match (s(input), s(weights)) {
                (&[c], &[d, wc]) if c == wc => Ok(vec![d]),
                (i, w) => Err(self.shape_error(op, format!("input {i:?} does not match weights {w:?}"))),
            },
            Op::Cosine(a, b) | Op::Dot(a, b) => match (s(a), s(b)) {
                (&[x], &[y]) if x == y => Ok(vec![1]),
                (x, y) => Err(self.shape_error(op, format!("expected equal-length vectors, got {x:?} and {y:?}"))),
            },
            Op::Sum(_) => Ok(vec![1]),
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let shape = self.infer_shape(&op)?;
        let values = forward::<f32>(&op, |id| self.nodes[id.0].value.data())?;
        let value = Tensor::new(shape, values)?;
        let requires_grad = op.operands().iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            differentiable: false,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding).ok_or_else(|| {
            Error::Shape(format!(
                "node #{} (conv2d): input {:?} incompatible with kernel {:?} at stride {stride}, padding {padding}",
                self.nodes.len(),
                self.shape(input),
                self.shape(kernel)
            ))
        })?;
        self.push(Op::Conv2d { input, kernel, geom })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f32) -> Result<NodeId> {
        self.push(Op::AddScalar(a, offset))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }

    /// `out[c, i, j] = scale[c] * input[c, i, j] + offset[c]`.
    pub fn channel_affine(&mut self, input: NodeId, scale: NodeId, offset: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelAffine { input, scale, offset })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let channels = self.shape(input).first().copied().unwrap_or(0);
        self.push(Op::GlobalAvgPool { input, channels })
    }

    pub fn linear_no_bias(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId> {
        self.push(Op::LinearNoBias { input, weights })
    }

    /// Fails with [`Error::DegenerateEmbedding`] if either operand has zero norm.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Cosine(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot(a, b))
    }

    /// Exact reverse-mode gradients of the scalar `output` with respect to every
    /// differentiable leaf. Leaves with no path to `output` get zero tensors.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, node #{} ({}) has shape {:?}",
                output.0,
                out.op.name(),
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.differentiable {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(NodeId(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, contrib: Vec<f32>| accumulate(&mut grads[id.0], contrib);
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                if wants(input) {
                    acc(input, tensor::conv2d_backward_input(&geom, g, val(kernel)));
                }
                if wants(kernel) {
                    acc(kernel, tensor::conv2d_backward_kernel(&geom, g, val(input)));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => acc(a, g.iter().map(|v| v * k).collect()),
            Op::AddScalar(a, _) => acc(a, g.to_vec()),
            Op::Relu(a) => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Square(a) => acc(a, g.iter().zip(val(a)).map(|(g, x)| 2.0 * x * g).collect()),
            Op::ChannelAffine { input, scale, offset } => {
                let [c, h, w] = *self.shape(input) else { unreachable!() };
                let area = h * w;
                let x = val(input);
                let s = val(scale);
                if wants(input) {
                    let mut dx = vec![0.0; c * area];
                    for ch in 0..c {
                        for i in ch * area..(ch + 1) * area {
                            dx[i] = g[i] * s[ch];
                        }
                    }
                    acc(input, dx);
                }
                if wants(scale) {
                    let ds = (0..c)
                        .map(|ch| (ch * area..(ch + 1) * area).map(|i| g[i] * x[i]).sum())
                        .collect();
                    acc(scale, ds);
                }
                if wants(offset) {
                    let dofs = (0..c).map(|ch| g[ch * area..(ch + 1) * area].iter().sum()).collect();
                    acc(offset, dofs);
                }
            }
            Op::GlobalAvgPool { input: a, .. } => {
                let [c, h, w] = *self.shape(a) else { unreachable!() };
                let area = h * w;
                let inv = 1.0 / area as f32;
                let mut dx = vec![0.0; c * area];
                for ch in 0..c {
                    dx[ch * area..(ch + 1) * area].fill(g[ch] * inv);
                }
                acc(a, dx);
            }
            Op::LinearNoBias { input, weights } => {
                let [d, c] = *self.shape(weights) else { unreachable!() };
                let wv = val(weights);
                if wants(input) {
                    let mut dx = vec![0.0; c];
                    for (row, gd) in g.iter().enumerate() {
                        for (k, dxk) in dx.iter_mut().enumerate() {
                            *dxk += wv[row * c + k] * gd;
                        }
                    }
                    acc(input, dx);
                }
                if wants(weights) {
                    let x = val(input);
                    let mut dw = vec![0.0; d * c];
                    for (row, gd) in g.iter().enumerate() {
                        for k in 0..c {
                            dw[row * c + k] = gd * x[k];
                        }
                    }
                    acc(weights, dw);
                }
            }
            Op::Cosine(a, b) => {
                let (x, y) = (val(a), val(b));
                let (nx, ny) = (tensor::norm(x), tensor::norm(y));
                let s = tensor::dot(x, y) / (nx * ny);
                let g0 = g[0];
                if wants(a) {
                    let inv = 1.0 / (nx * ny);
                    let k = s / (nx * nx);
                    acc(a, x.iter().zip(y).map(|(xi, yi)| g0 * (yi * inv - k * xi)).collect());
                }
                if wants(b) {
                    let inv = 1.0 / (nx * ny);
                    let k = s / (ny * ny);
                    acc(b, y.iter().zip(x).map(|(yi, xi)| g0 * (xi * inv - k * yi)).collect());
                }
            }
            Op::Sum(a) => acc(a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Dot(a, b) => {
                if wants(a) {
                    acc(a, val(b).iter().map(|v| g[0] * v).collect());
                }
                if wants(b) {
                    acc(b, val(a).iter().map(|v| g[0] * v).collect());
                }
            }
        }
    }

    /// Re-evaluates the graph up to `output` in 64-bit arithmetic, with the given
    /// leaves replaced by new values.
    pub fn evaluate_f64(&self, output: NodeId, overrides: &[(NodeId, &[f64])]) -> Result<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(output.0 + 1);
        for (idx, node) in self.nodes[..=output.0].iter().enumerate() {
            let v = match node.op {
                Op::Leaf => match overrides.iter().find(|(id, _)| id.0 == idx) {
                    Some((_, data)) => {
                        if data.len() != node.value.len() {
                            return Err(Error::Shape(format!(
                                "override for leaf #{idx} has {} values, expected {}",
                                data.len(),
                                node.value.len()
                            )));
                        }
                        data.to_vec()
                    }
                    None => node.value.data().iter().map(|&v| v as f64).collect(),
                },
                ref op => forward::<f64>(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values.pop().expect("output node evaluated"))
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn forward<'a, T: Float + 'a>(op: &Op, val: impl Fn(NodeId) -> &'a [T]) -> Result<Vec<T>> {
    let unary = |a: NodeId, f: &dyn Fn(T) -> T| val(a).iter().map(|&x| f(x)).collect::<Vec<T>>();
    let binary = |a: NodeId, b: NodeId, f: &dyn Fn(T, T) -> T| {
        val(a).iter().zip(val(b)).map(|(&x, &y)| f(x, y)).collect::<Vec<T>>()
    };
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own values"),
        Op::Conv2d { input, kernel, geom } => tensor::conv2d_forward(&geom, val(input), val(kernel)),
        Op::Add(a, b) => binary(a, b, &|x, y| x + y),
        Op::Sub(a, b) => binary(a, b, &|x, y| x - y),
        Op::Mul(a, b) => binary(a, b, &|x, y| x * y),
        Op::Scale(a, k) => {
            let k = T::from(k).unwrap();
            unary(a, &|x| x * k)
        }
        Op::AddScalar(a, k) => {
            let k = T::from(k).unwrap();
            unary(a, &|x| x + k)
        }
        Op::Relu(a) => unary(a, &|x| if x > T::zero() { x } else { T::zero() }),
        Op::Square(a) => unary(a, &|x| x * x),
        Op::ChannelAffine { input, scale, offset } => {
            let (s, o) = (val(scale), val(offset));
            let x = val(input);
            let area = x.len() / s.len();
            x.iter()
                .enumerate()
                .map(|(i, &v)| s[i / area] * v + o[i / area])
                .collect()
        }
        Op::GlobalAvgPool { input, channels } => {
            let x = val(input);
            tensor::global_avg_pool(x, channels, x.len() / channels)
        }
        Op::LinearNoBias { input, weights } => {
            let x = val(input);
            let w = val(weights);
            tensor::matvec(w, x, w.len() / x.len(), x.len())
        }
        Op::Cosine(a, b) => vec![tensor::cosine(val(a), val(b)).ok_or(Error::DegenerateEmbedding)?],
        Op::Sum(a) => vec![val(a).iter().fold(T::zero(), |acc, &v| acc + v)],
        Op::Dot(a, b) => vec![tensor::dot(val(a), val(b))],
    })
}

/// Outcome of comparing [`Graph::backward`] against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDifferenceReport {
    pub max_relative_error: f64,
    /// Relative error per sampled coordinate, in sampling order.
    pub relative_errors: Vec<f64>,
    pub coordinates: Vec<usize>,
    pub no_coordinates_sampled: bool,
}

impl FiniteDifferenceReport {
    pub fn fraction_within(&self, tolerance: f64) -> f64 {
        if self.relative_errors.is_empty() {
            return 1.0;
        }
        let ok = self.relative_errors.iter().filter(|&&e| e <= tolerance).count();
        ok as f64 / self.relative_errors.len() as f64
    }
}

/// Compares analytic gradients of `output` with respect to `leaf` against
/// `(f(x + h) - f(x - h)) / 2h`, evaluated in 64-bit, on `sample` seeded
/// coordinates. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn finite_difference_check(
    graph: &Graph,
    output: NodeId,
    leaf: NodeId,
    h: f64,
    sample: usize,
    seed: u64,
) -> Result<FiniteDifferenceReport> {
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {h}")));
    }
    if sample == 0 {
        return Ok(FiniteDifferenceReport {
            max_relative_error: 0.0,
            relative_errors: vec![],
            coordinates: vec![],
            no_coordinates_sampled: true,
        });
    }
    let grads = graph.backward(output)?;
    let analytic = grads
        .get(leaf)
        .ok_or_else(|| Error::Precondition(format!("node #{} is not a differentiable leaf", leaf.0)))?;
    let base: Vec<f64> = graph.value(leaf).data().iter().map(|&v| v as f64).collect();
    let n = base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coordinates: Vec<usize> = sample_indices(&mut rng, n, sample.min(n)).into_vec();

    let mut relative_errors = Vec::with_capacity(coordinates.len());
    let mut perturbed = base.clone();
    for &i in &coordinates {
        perturbed[i] = base[i] + h;
        let plus = graph.evaluate_f64(output, &[(leaf, &perturbed)])?[0];
        perturbed[i] = base[i] - h;
        let minus = graph.evaluate_f64(output, &[(leaf, &perturbed)])?[0];
        perturbed[i] = base[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        relative_errors.push((a - numeric).abs() / denom);
    }
    let max_relative_error = relative_errors.iter().cloned().fold(0.0, f64::max);
    Ok(FiniteDifferenceReport {
        max_relative_error,
        relative_errors,
        coordinates,
        no_coordinates_sampled: false,
    })
}
