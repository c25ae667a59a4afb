use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    Conv2dTransposed { input: NodeId, kernel: NodeId, geom: ConvGeom },
    ChannelBias { input: NodeId, bias: NodeId },
    Relu(NodeId),
    Dropout { input: NodeId, scale: Vec<f64> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Sum(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    ClampMax(NodeId, f64),
    ClampMin(NodeId, f64),
    MatVec { matrix: NodeId, vector: NodeId },
    SoftmaxChannels(NodeId),
    SelectChannel { input: NodeId, channel: usize },
    Index { input: NodeId, index: usize },
    Stack(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use recording of tensor operations for reverse-mode
/// differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is one reverse sweep. Build a fresh graph
/// per step; parameters enter as [`Graph::param`] leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by the node they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` when nothing reached it.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(id.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("operands {:?} and {:?} differ and neither is scalar", a.shape(), b.shape()),
        ))
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let x = self.value(input).shape();
        let k = self.value(kernel).shape();
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        if x.len() != 3 || k.len() != 4 {
            return Err(Error::shape(
                op,
                format!("expected input [C,H,W] and kernels [A,B,kH,kW], got {x:?} and {k:?}"),
            ));
        }
        let (kh, kw) = (k[2], k[3]);
        if !transposed {
            if x[0] != k[1] {
                return Err(Error::shape(
                    op,
                    format!("input has {} channels but kernels expect {}", x[0], k[1]),
                ));
            }
            if x[1] + 2 * padding < kh || x[2] + 2 * padding < kw {
                return Err(Error::shape(
                    op,
                    format!("kernel {kh}x{kw} does not fit input {}x{} with padding {padding}", x[1], x[2]),
                ));
            }
            Ok(ConvGeom {
                c_in: x[0],
                h_in: x[1],
                w_in: x[2],
                c_out: k[0],
                kh,
                kw,
                stride,
                pad: padding,
                h_out: (x[1] + 2 * padding - kh) / stride + 1,
                w_out: (x[2] + 2 * padding - kw) / stride + 1,
            })
        } else {
            // The transpose maps the conv's output space back to its input
            // space, so the roles of the geometry fields are swapped.
            if x[0] != k[0] {
                return Err(Error::shape(
                    op,
                    format!("input has {} channels but kernels expect {}", x[0], k[0]),
                ));
            }
            let full_h = (x[1] - 1) * stride + kh;
            let full_w = (x[2] - 1) * stride + kw;
            if full_h <= 2 * padding || full_w <= 2 * padding {
                return Err(Error::shape(
                    op,
                    format!("padding {padding} consumes the whole {full_h}x{full_w} output"),
                ));
            }
            Ok(ConvGeom {
                c_in: k[1],
                h_in: full_h - 2 * padding,
                w_in: full_w - 2 * padding,
                c_out: x[0],
                kh,
                kw,
                stride,
                pad: padding,
                h_out: x[1],
                w_out: x[2],
            })
        }
    }

    /// Cross-correlation (no kernel flip) of `input[C_in,H,W]` with
    /// `kernels[C_out,C_in,kH,kW]`.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = self.conv_geom("conv2d", input, kernels, stride, padding, false)?;
        let mut out = vec![0.0; geom.output_len()];
        conv::forward(self.value(input).data(), self.value(kernels).data(), &geom, &mut out);
        let value = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        let g = self.grad_flag(&[input, kernels]);
        Ok(self.push(value, Op::Conv2d { input, kernel: kernels, geom }, g))
    }

    /// Adjoint of [`Graph::conv2d`]. `kernels` is `[C_in, C_out, kH, kW]`,
    /// the same tensor the forward conv mapping `C_out -> C_in` would use.
    /// Output spatial size is `(H - 1) * stride - 2 * padding + kH`.
    pub fn conv2d_transposed(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom("conv2d_transposed", input, kernels, stride, padding, true)?;
        let mut out = vec![0.0; geom.input_len()];
        conv::backward_input(self.value(input).data(), self.value(kernels).data(), &geom, &mut out);
        let value = Tensor::new(&[geom.c_in, geom.h_in, geom.w_in], out)?;
        let g = self.grad_flag(&[input, kernels]);
        Ok(self.push(value, Op::Conv2dTransposed { input, kernel: kernels, geom }, g))
    }

    /// Adds `bias[C]` to every pixel of channel `c` of `input[C,H,W]`.
    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.shape().len() != 3 || b.shape() != [x.shape()[0]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} does not match channels of {:?}", b.shape(), x.shape()),
            ));
        }
        let plane = x.shape()[1] * x.shape()[2];
        let mut out = x.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let g = self.grad_flag(&[input, bias]);
        Ok(self.push(out, Op::ChannelBias { input, bias }, g))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Relu(input), g)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that
    /// evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, rate: f64, rng: &mut R, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * scale[i]);
        let g = self.grad_flag(&[input]);
        Ok(self.push(out, Op::Dropout { input, scale }, g))
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, make: fn(NodeId, NodeId) -> Op) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta, tb)?;
        let out = Tensor::from_fn(&shape, |i| f(at(ta, i), at(tb, i)));
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(out, make(a, b), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out = self.value(input).map(|v| v * factor);
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Scale(input, factor), g)
    }

    pub fn add_scalar(&mut self, input: NodeId, offset: f64) -> NodeId {
        let out = self.value(input).map(|v| v + offset);
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Offset(input), g)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Sum(input), g)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let n = self.value(input).len() as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    pub fn ln(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(f64::ln);
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Ln(input), g)
    }

    /// Square root whose derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(f64::sqrt);
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Sqrt(input), g)
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(softplus);
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Softplus(input), g)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(f64::abs);
        let g = self.grad_flag(&[input]);
        self.push(out, Op::Abs(input), g)
    }

    /// `min(x, limit)` elementwise.
    pub fn clamp_max(&mut self, input: NodeId, limit: f64) -> NodeId {
        let out = self.value(input).map(|v| v.min(limit));
        let g = self.grad_flag(&[input]);
        self.push(out, Op::ClampMax(input, limit), g)
    }

    /// `max(x, limit)` elementwise.
    pub fn clamp_min(&mut self, input: NodeId, limit: f64) -> NodeId {
        let out = self.value(input).map(|v| v.max(limit));
        let g = self.grad_flag(&[input]);
        self.push(out, Op::ClampMin(input, limit), g)
    }

    /// `matrix[M,N] · vector[N] -> [M]`.
    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        let (m, v) = (self.value(matrix), self.value(vector));
        if m.shape().len() != 2 || v.shape().len() != 1 || m.shape()[1] != v.shape()[0] {
            return Err(Error::shape(
                "matvec",
                format!("cannot multiply {:?} by {:?}", m.shape(), v.shape()),
            ));
        }
        let cols = m.shape()[1];
        let out: Vec<f64> = m
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(v.data()).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::new(&[m.shape()[0]], out)?;
        let g = self.grad_flag(&[matrix, vector]);
        Ok(self.push(value, Op::MatVec { matrix, vector }, g))
    }

    /// Softmax across the channel axis of `[C,H,W]`, independently per pixel.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape().len() != 3 {
            return Err(Error::shape("softmax_channels", format!("expected [C,H,W], got {:?}", x.shape())));
        }
        let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        let mut out = Tensor::zeros(x.shape());
        let (src, dst) = (x.data(), out.data_mut());
        for p in 0..plane {
            let max = (0..c).map(|k| src[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                let e = (src[k * plane + p] - max).exp();
                dst[k * plane + p] = e;
                total += e;
            }
            for k in 0..c {
                dst[k * plane + p] /= total;
            }
        }
        let g = self.grad_flag(&[input]);
        Ok(self.push(out, Op::SoftmaxChannels(input), g))
    }

    /// Channel `channel` of `[C,H,W]` as `[H,W]`.
    pub fn select_channel(&mut self, input: NodeId, channel: usize) -> Result<NodeId> {
        let out = self.value(input).channel(channel)?;
        let g = self.grad_flag(&[input]);
        Ok(self.push(out, Op::SelectChannel { input, channel }, g))
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn index(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        if index >= x.len() {
            return Err(Error::shape("index", format!("index {index} out of {} elements", x.len())));
        }
        let out = Tensor::scalar(x.data()[index]);
        let g = self.grad_flag(&[input]);
        Ok(self.push(out, Op::Index { input, index }, g))
    }

    /// Concatenates scalars into a vector.
    pub fn stack(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("stack", "nothing to stack"));
        }
        let mut data = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::shape("stack", format!("operand of shape {:?} is not scalar", v.shape())));
            }
            data.push(v.item());
        }
        let out = Tensor::new(&[inputs.len()], data)?;
        let g = self.grad_flag(inputs);
        Ok(self.push(out, Op::Stack(inputs.to_vec()), g))
    }

    /// Hash of the active branch of every piecewise op (relu, clamps,
    /// abs, sqrt at 0). Two evaluations with equal signatures lie on the
    /// same smooth piece of the graph.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (src, pred): (NodeId, Box<dyn Fn(f64) -> bool>) = match node.op {
                Op::Relu(a) => (a, Box::new(|v| v > 0.0)),
                Op::Abs(a) => (a, Box::new(|v| v >= 0.0)),
                Op::Sqrt(a) => (a, Box::new(|v| v > 0.0)),
                Op::ClampMax(a, lim) => (a, Box::new(move |v| v < lim)),
                Op::ClampMin(a, lim) => (a, Box::new(move |v| v > lim)),
                _ => continue,
            };
            i.hash(&mut h);
            for &v in self.value(src).data() {
                pred(v).hash(&mut h);
            }
        }
        h.finish()
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", value.shape())));
        }
        if !value.item().is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", value.item())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            self.propagate(node, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut accumulate = |id: NodeId, contribution: Tensor| match &mut grads[id.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        };
        // Reduces a broadcast contribution back to a scalar operand.
        let fit = |id: NodeId, t: Tensor| -> Tensor {
            if self.value(id).is_scalar() && !t.is_scalar() {
                Tensor::scalar(t.sum())
            } else {
                t
            }
        };
        let g = grad.data();
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                if needs(*input) {
                    let mut gi = Tensor::zeros(self.value(*input).shape());
                    conv::backward_input(g, self.value(*kernel).data(), geom, gi.data_mut());
                    accumulate(*input, gi);
                }
                if needs(*kernel) {
                    let mut gk = Tensor::zeros(self.value(*kernel).shape());
                    conv::backward_kernel(g, self.value(*input).data(), geom, gk.data_mut());
                    accumulate(*kernel, gk);
                }
            }
            Op::Conv2dTransposed { input, kernel, geom } => {
                if needs(*input) {
                    let mut gi = Tensor::zeros(self.value(*input).shape());
                    conv::forward(g, self.value(*kernel).data(), geom, gi.data_mut());
                    accumulate(*input, gi);
                }
                if needs(*kernel) {
                    let mut gk = Tensor::zeros(self.value(*kernel).shape());
                    conv::backward_kernel(self.value(*input).data(), g, geom, gk.data_mut());
                    accumulate(*kernel, gk);
                }
            }
            Op::ChannelBias { input, bias } => {
                if needs(*input) {
                    accumulate(*input, grad.clone());
                }
                if needs(*bias) {
                    let c = self.value(*bias).len();
                    let plane = g.len() / c;
                    let gb = Tensor::from_fn(&[c], |k| g[k * plane..(k + 1) * plane].iter().sum());
                    accumulate(*bias, gb);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(*a, Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { g[i] } else { 0.0 }));
            }
            Op::Dropout { input, scale } => {
                accumulate(*input, Tensor::from_fn(out.shape(), |i| g[i] * scale[i]));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(*a, fit(*a, grad.clone()));
                }
                if needs(*b) {
                    accumulate(*b, fit(*b, grad.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(*a, fit(*a, grad.clone()));
                }
                if needs(*b) {
                    accumulate(*b, fit(*b, grad.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    accumulate(*a, fit(*a, Tensor::from_fn(out.shape(), |i| g[i] * at(tb, i))));
                }
                if needs(*b) {
                    accumulate(*b, fit(*b, Tensor::from_fn(out.shape(), |i| g[i] * at(ta, i))));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    accumulate(*a, fit(*a, Tensor::from_fn(out.shape(), |i| g[i] / at(tb, i))));
                }
                if needs(*b) {
                    let gb = Tensor::from_fn(out.shape(), |i| {
                        let d = at(tb, i);
                        -g[i] * at(ta, i) / (d * d)
                    });
                    accumulate(*b, fit(*b, gb));
                }
            }
            Op::Scale(a, factor) => accumulate(*a, grad.map(|v| v * factor)),
            Op::Offset(a) => accumulate(*a, grad.clone()),
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                accumulate(*a, Tensor::full(shape, g[0]));
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                accumulate(*a, Tensor::from_fn(x.shape(), |i| g[i] / x.data()[i]));
            }
            Op::Sqrt(a) => {
                let o = out.data();
                accumulate(*a, Tensor::from_fn(out.shape(), |i| if o[i] > 0.0 { 0.5 * g[i] / o[i] } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                accumulate(*a, Tensor::from_fn(x.shape(), |i| g[i] * sigmoid(x.data()[i])));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                accumulate(*a, Tensor::from_fn(x.shape(), |i| if x.data()[i] >= 0.0 { g[i] } else { -g[i] }));
            }
            Op::ClampMax(a, lim) => {
                let x = self.value(*a);
                accumulate(*a, Tensor::from_fn(x.shape(), |i| if x.data()[i] < *lim { g[i] } else { 0.0 }));
            }
            Op::ClampMin(a, lim) => {
                let x = self.value(*a);
                accumulate(*a, Tensor::from_fn(x.shape(), |i| if x.data()[i] > *lim { g[i] } else { 0.0 }));
            }
            Op::MatVec { matrix, vector } => {
                let (m, v) = (self.value(*matrix), self.value(*vector));
                let cols = m.shape()[1];
                if needs(*matrix) {
                    accumulate(*matrix, Tensor::from_fn(m.shape(), |i| g[i / cols] * v.data()[i % cols]));
                }
                if needs(*vector) {
                    let gv = Tensor::from_fn(v.shape(), |j| {
                        (0..m.shape()[0]).map(|r| g[r] * m.data()[r * cols + j]).sum()
                    });
                    accumulate(*vector, gv);
                }
            }
            Op::SoftmaxChannels(a) => {
                let (c, plane) = (out.shape()[0], out.shape()[1] * out.shape()[2]);
                let y = out.data();
                let mut gi = Tensor::zeros(out.shape());
                let dst = gi.data_mut();
                for p in 0..plane {
                    let dot: f64 = (0..c).map(|k| g[k * plane + p] * y[k * plane + p]).sum();
                    for k in 0..c {
                        dst[k * plane + p] = y[k * plane + p] * (g[k * plane + p] - dot);
                    }
                }
                accumulate(*a, gi);
            }
            Op::SelectChannel { input, channel } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                let plane = g.len();
                gi.data_mut()[channel * plane..(channel + 1) * plane].copy_from_slice(g);
                accumulate(*input, gi);
            }
            Op::Index { input, index } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                gi.data_mut()[*index] = g[0];
                accumulate(*input, gi);
            }
            Op::Stack(inputs) => {
                for (k, &id) in inputs.iter().enumerate() {
                    if needs(id) {
                        accumulate(id, Tensor::scalar(g[k]));
                    }
                }
            }
        }
    }
}
