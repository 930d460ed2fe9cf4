//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. [`Tape::backward`] replays the nodes in
//! reverse order, summing gradient contributions into shared inputs.

use super::kernels::{self, Conv2dGeometry, PoolGeometry};
use super::{dims4, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
    Relu,
    Upsample,
    Concat,
    SoftmaxChannels,
    CrossEntropy,
    Sum,
    Dot,
    Mul,
    Add,
    Scale,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Conv2dGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Upsample {
        input: Var,
        shape: [usize; 4],
    },
    Concat {
        parts: Vec<Var>,
    },
    SoftmaxChannels {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u16>,
        ignore_index: Option<u16>,
        count: usize,
    },
    Sum {
        input: Var,
    },
    Dot {
        input: Var,
        coeffs: Vec<T>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Concat { .. } => OpKind::Concat,
            Op::SoftmaxChannels { .. } => OpKind::SoftmaxChannels,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
            Op::Mul { .. } => OpKind::Mul,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Concat { parts } => parts.clone(),
            Op::Mul { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Upsample { input, .. }
            | Op::SoftmaxChannels { input }
            | Op::Sum { input }
            | Op::Dot { input, .. }
            | Op::Scale { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Records a copy of `t` as a leaf; it takes part in differentiation
    /// when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Number of recorded operations that read `v`.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().iter().filter(|&&i| i == v).count())
            .sum()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = Conv2dGeometry::new(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            self.value(bias),
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            geom.output_shape(),
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(input), window, stride)?;
        let (out, argmax) = kernels::maxpool2d_forward(&geom, self.value(input));
        let rg = self.requires_grad(input);
        Ok(self.push(geom.output_shape(), out, rg, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, Op::Relu { input })
    }

    /// Bilinear (align-corners) resize to a spatial size no smaller than the input.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = dims4("upsample_bilinear", self.shape(input))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "upsample_bilinear",
                "target extent must be positive",
            ));
        }
        if out_h < shape[2] || out_w < shape[3] {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!(
                    "target {out_h}x{out_w} is smaller than input {}x{}",
                    shape[2], shape[3]
                ),
            ));
        }
        let out = kernels::upsample_bilinear_forward(self.value(input), shape, out_h, out_w);
        let rg = self.requires_grad(input);
        Ok(self.push(
            vec![shape[0], shape[1], out_h, out_w],
            out,
            rg,
            Op::Upsample { input, shape },
        ))
    }

    /// Concatenates along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let [n, _, h, w] = dims4("concat_channels", self.shape(first))?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = dims4("concat_channels", self.shape(p))?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            channels += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            vec![n, channels, h, w],
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let shape = dims4("softmax_channels", self.shape(input))?;
        let out = kernels::softmax_channels(self.value(input), shape);
        let rg = self.requires_grad(input);
        Ok(self.push(shape.to_vec(), out, rg, Op::SoftmaxChannels { input }))
    }

    /// Mean pixel-wise cross-entropy of `logits` (N×C×H×W) against `labels`
    /// (N·H·W values, row-major).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u16],
        ignore_index: Option<u16>,
    ) -> Result<Var> {
        let shape = dims4("softmax_cross_entropy", self.shape(logits))?;
        let ce = kernels::softmax_cross_entropy_forward(
            self.value(logits),
            shape,
            labels,
            ignore_index,
        )?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![ce.loss],
            rg,
            Op::CrossEntropy {
                logits,
                probs: ce.probs,
                labels: labels.to_vec(),
                ignore_index,
                count: ce.count,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self
            .value(input)
            .iter()
            .fold(T::zero(), |a, &b| a + b);
        let rg = self.requires_grad(input);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    /// Inner product with a fixed coefficient buffer of the same length.
    pub fn dot(&mut self, input: Var, coeffs: &[T]) -> Result<Var> {
        if coeffs.len() != self.value(input).len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape(input).to_vec(),
                right: vec![coeffs.len()],
            });
        }
        let s = self
            .value(input)
            .iter()
            .zip(coeffs)
            .fold(T::zero(), |a, (&x, &c)| a + x * c);
        let rg = self.requires_grad(input);
        Ok(self.push(
            vec![1],
            vec![s],
            rg,
            Op::Dot {
                input,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, Op::Scale { input, factor })
    }

    /// Runs every backward rule in reverse recording order starting from a
    /// scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        // reachable or not, every differentiable leaf ends with a buffer
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        contrib(slot);
    }

    fn add_into(&mut self, v: Var, delta: &[T]) {
        self.accumulate(v, |g| {
            g.iter_mut().zip(delta).for_each(|(a, &d)| *a = *a + d);
        });
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // temporarily detach the op so saved state can be borrowed freely
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    self.nodes[input.0].requires_grad,
                );
                if let Some(dx) = grads.input {
                    self.add_into(*input, &dx);
                }
                self.add_into(*weight, &grads.weight);
                self.add_into(*bias, &grads.bias);
            }
            Op::MaxPool2d { input, argmax } => {
                self.accumulate(*input, |dx| {
                    for (&j, &gv) in argmax.iter().zip(g) {
                        dx[j] = dx[j] + gv;
                    }
                });
            }
            Op::Relu { input } => {
                let dx: Vec<T> = self.nodes[input.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.add_into(*input, &dx);
            }
            Op::Upsample { input, shape } => {
                let out = &self.nodes[i].shape;
                let dx = kernels::upsample_bilinear_backward(g, *shape, out[2], out[3]);
                self.add_into(*input, &dx);
            }
            Op::Concat { parts } => {
                let shape = self.nodes[i].shape.clone();
                let (n, total, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    self.accumulate(p, |dx| {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * hw..(b * total + offset + pc) * hw];
                            let dst = &mut dx[b * pc * hw..(b + 1) * pc * hw];
                            dst.iter_mut().zip(src).for_each(|(a, &s)| *a = *a + s);
                        }
                    });
                    offset += pc;
                }
            }
            Op::SoftmaxChannels { input } => {
                let y = std::mem::take(&mut self.nodes[i].value);
                let shape = &self.nodes[i].shape;
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dx = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot = (0..c)
                            .map(|k| g[base + k * hw + p] * y[base + k * hw + p])
                            .fold(T::zero(), |a, v| a + v);
                        for k in 0..c {
                            let j = base + k * hw + p;
                            dx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                self.nodes[i].value = y;
                self.add_into(*input, &dx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore_index,
                count,
            } => {
                if *count > 0 {
                    let shape = self.nodes[logits.0].shape.clone();
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let scale = g[0] / T::from_usize(*count).expect("count fits");
                    self.accumulate(*logits, |dx| {
                        for (pix, &l) in labels.iter().enumerate() {
                            if Some(l) == *ignore_index {
                                continue;
                            }
                            let (b, p) = (pix / hw, pix % hw);
                            for k in 0..c {
                                let j = b * c * hw + k * hw + p;
                                let onehot = if k == l as usize { T::one() } else { T::zero() };
                                dx[j] = dx[j] + (probs[j] - onehot) * scale;
                            }
                        }
                    });
                }
            }
            Op::Sum { input } => {
                let gv = g[0];
                self.accumulate(*input, |dx| dx.iter_mut().for_each(|d| *d = *d + gv));
            }
            Op::Dot { input, coeffs } => {
                let gv = g[0];
                self.accumulate(*input, |dx| {
                    dx.iter_mut()
                        .zip(coeffs)
                        .for_each(|(d, &c)| *d = *d + c * gv)
                });
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = self.nodes[b.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| y * gv)
                    .collect();
                let db: Vec<T> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| x * gv)
                    .collect();
                self.add_into(*a, &da);
                self.add_into(*b, &db);
            }
            Op::Add { a, b } => {
                self.add_into(*a, g);
                self.add_into(*b, g);
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                self.accumulate(*input, |dx| {
                    dx.iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d = *d + gv * f)
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradient buffer of `v` after [`Tape::backward`]; `None` when `v` does
    /// not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor<T>) {
        t.grad = self.grad(v).map(<[T]>::to_vec);
    }
}
