//! Eager tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every op as it executes; [`Tape::backward`] walks the
//! record in reverse and leaves `∂loss/∂leaf` on every leaf that was created
//! with `requires_grad`. A tape is built per forward pass and dropped after
//! the gradients are read.

use crate::error::{config_err, usage_err, Result};
use crate::kernels::{self, Conv2dOptions, ConvGeometry};
use crate::tensor::{Float, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    ScaleChannels {
        x: Var,
        weights: Var,
    },
    GlobalAvgPool(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Scale(Var, Float),
    /// Scalar function of `input` whose gradient was computed at forward time.
    ScalarFn {
        input: Var,
        grad: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Concat(_) => "concat_channels",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. Gradients are kept only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = match &op {
            Op::Leaf => unreachable!("leaves are pushed through Tape::leaf"),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                self.requires_grad(*input)
                    || self.requires_grad(*weight)
                    || bias.is_some_and(|b| self.requires_grad(b))
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::Upsample { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::ScalarFn { input: x, .. } => self.requires_grad(*x),
            Op::Add(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Concat(parts) => parts.iter().any(|&p| self.requires_grad(p)),
            Op::ScaleChannels { x, weights } => {
                self.requires_grad(*x) || self.requires_grad(*weights)
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: &Conv2dOptions,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), opts)?;
        if let Some(b) = bias {
            let expected = Shape::new(1, geom.out_channels, 1, 1);
            if self.shape(b) != expected {
                return Err(config_err!(
                    "conv2d bias must be {expected}, got {}",
                    self.shape(b)
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Fully connected layer on `[B, C, 1, 1]` inputs with weight `[C_out, C, 1, 1]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() != 1 {
            return Err(config_err!("dense expects [B, C, 1, 1] input, got {s}"));
        }
        let w = self.shape(weight);
        if w.plane() != 1 {
            return Err(config_err!("dense expects [C_out, C, 1, 1] weight, got {w}"));
        }
        self.conv2d(x, weight, bias, &Conv2dOptions::default())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "add of mismatched shapes {} and {}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Concatenates along the channel axis; batch and spatial extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| config_err!("concat_channels of an empty list"))?;
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.batch(), s.height(), s.width()) != (first.batch(), first.height(), first.width())
            {
                return Err(config_err!("concat_channels of {s} with {first}"));
            }
            channels += s.channels();
        }
        let shape = Shape::new(first.batch(), channels, first.height(), first.width());
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..first.batch() {
            for &p in parts {
                data.extend_from_slice(self.value(p).batch_item(b));
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Multiplies each channel plane of `x` by the matching entry of `weights` (`[B, C, 1, 1]`).
    pub fn scale_channels(&mut self, x: Var, weights: Var) -> Result<Var> {
        let s = self.shape(x);
        let expected = Shape::new(s.batch(), s.channels(), 1, 1);
        if self.shape(weights) != expected {
            return Err(config_err!(
                "scale_channels weights must be {expected}, got {}",
                self.shape(weights)
            ));
        }
        let plane = s.plane();
        let w = self.value(weights).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= w[i]);
        }
        self.push(out, Op::ScaleChannels { x, weights })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let plane = s.plane();
        if plane == 0 {
            return Err(config_err!("global_avg_pool of empty planes {s}"));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<Float>() / plane as Float)
            .collect();
        let out = Tensor::from_vec([s.batch(), s.channels(), 1, 1], data)?;
        self.push(out, Op::GlobalAvgPool(x))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(config_err!("upsample factor must be >= 1"));
        }
        let out = kernels::upsample_bilinear_forward(self.value(x), factor);
        self.push(out, Op::Upsample { x, factor })
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2_forward(self.value(x))?;
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Sum of all elements, as a `[1, 1, 1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// Records a scalar-valued function of `input` with a precomputed gradient.
    pub fn scalar_fn(&mut self, input: Var, value: Float, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(config_err!(
                "scalar_fn gradient {} does not match input {}",
                grad.shape(),
                self.shape(input)
            ));
        }
        grad.ensure_finite("scalar_fn gradient")?;
        self.push(Tensor::scalar(value), Op::ScalarFn { input, grad })
    }

    /// Reverse-mode pass from the scalar `loss`.
    ///
    /// Afterwards every leaf with `requires_grad` holds `∂loss/∂leaf` (zeros
    /// for leaves the loss does not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(usage_err!("backward needs a [1, 1, 1, 1] loss, got {shape}"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = [
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let d = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    geom,
                    want,
                );
                if let Some(t) = d.input {
                    send(*input, t);
                }
                if let Some(t) = d.weight {
                    send(*weight, t);
                }
                if let (Some(b), Some(t)) = (bias, d.bias) {
                    send(*b, t);
                }
            }
            Op::Relu(x) => {
                let mut t = g.clone();
                for (gv, &xv) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                send(*x, t);
            }
            Op::Sigmoid(x) => {
                let mut t = g.clone();
                for (gv, &y) in t.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= y * (1.0 - y);
                }
                send(*x, t);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Concat(parts) => {
                let batch = g.shape().batch();
                let mut offset = 0;
                let item = g.shape().item();
                for &p in parts {
                    let s = self.shape(p);
                    let n = s.item();
                    let mut data = Vec::with_capacity(s.numel());
                    for b in 0..batch {
                        data.extend_from_slice(&g.data()[b * item + offset..][..n]);
                    }
                    offset += n;
                    send(p, Tensor::from_vec(s, data).expect("concat slice shape"));
                }
            }
            Op::ScaleChannels { x, weights } => {
                let xs = self.value(*x);
                let ws = self.value(*weights);
                let plane = xs.shape().plane();
                if self.requires_grad(*x) {
                    let mut t = g.clone();
                    for (c, chunk) in t.data_mut().chunks_exact_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= ws.data()[c]);
                    }
                    send(*x, t);
                }
                if self.requires_grad(*weights) {
                    let data = g
                        .data()
                        .chunks_exact(plane)
                        .zip(xs.data().chunks_exact(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    send(
                        *weights,
                        Tensor::from_vec(ws.shape(), data).expect("channel weight shape"),
                    );
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s.plane();
                let mut t = Tensor::zeros(s);
                for (chunk, &gv) in t.data_mut().chunks_exact_mut(plane).zip(g.data()) {
                    chunk.fill(gv / plane as Float);
                }
                send(*x, t);
            }
            Op::Upsample { x, factor } => {
                send(
                    *x,
                    kernels::upsample_bilinear_backward(g, self.shape(*x), *factor),
                );
            }
            Op::MaxPool2 { x, argmax } => {
                let mut t = Tensor::zeros(self.shape(*x));
                let d = t.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                send(*x, t);
            }
            Op::Sum(x) => send(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Scale(x, factor) => send(*x, g.map(|v| v * factor)),
            Op::ScalarFn { input, grad } => {
                let upstream = g.item();
                send(*input, grad.map(|v| v * upstream));
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: Float) -> Float {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
