//! Reverse-mode gradient tape.
//!
//! Each differentiable call appends one node holding its output value. A
//! [`Var`] is the identity of a node. [`Tape::backward`] walks the nodes in
//! exact reverse order of execution and accumulates gradients additively
//! when a value feeds several consumers.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, stride: usize, pad: usize },
    Relu { input: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalMaxPool { input: Var, argmax: Vec<(usize, usize)> },
    GlobalAvgPool { input: Var },
    CrossChannelAvgPool { input: Var, k: usize },
    FullyConnected { input: Var, weight: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Tensor<T> },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by [`Var`]; each has the shape of its value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Argmax locations recorded by a global max pool node.
    pub fn gmp_argmax(&self, var: Var) -> Option<&[(usize, usize)]> {
        match &self.nodes[var.0].op {
            Op::GlobalMaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { input, weight, stride, pad }, &[input, weight]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu(self.value(input));
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(input), window, stride, pad)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::global_max_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalMaxPool { input, argmax }, &[input]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool { input }, &[input]))
    }

    pub fn cross_channel_avg_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let out = kernels::cross_channel_avg_pool(self.value(input), k)?;
        Ok(self.push(out, Op::CrossChannelAvgPool { input, k }, &[input]))
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::FullyConnected { input, weight, bias }, &[input, weight, bias]))
    }

    /// Scalar (shape `[1]`) cross-entropy loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), label)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label, probs },
            &[logits],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|x| x * factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    /// Back-propagates from a scalar `output` (seeded with gradient 1).
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, stride, pad } => {
                    let (dx, dw) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *pad,
                        &g,
                        needs(input),
                        needs(weight),
                    )?;
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                }
                Op::Relu { input } => {
                    let dx = kernels::relu_backward(self.value(*input), &g);
                    accumulate(&mut grads, *input, Some(dx));
                }
                Op::MaxPool2d { input, argmax } => {
                    let dx = kernels::max_pool2d_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads, *input, Some(dx));
                }
                Op::GlobalMaxPool { input, argmax } => {
                    let dx = kernels::global_max_pool_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads, *input, Some(dx));
                }
                Op::GlobalAvgPool { input } => {
                    let dx = kernels::global_avg_pool_backward(self.value(*input).shape(), &g);
                    accumulate(&mut grads, *input, Some(dx));
                }
                Op::CrossChannelAvgPool { input, k } => {
                    let dx = kernels::cross_channel_avg_pool_backward(*k, &g);
                    accumulate(&mut grads, *input, Some(dx));
                }
                Op::FullyConnected { input, weight, bias } => {
                    let (dx, dw, db) =
                        kernels::fully_connected_backward(self.value(*input), self.value(*weight), &g);
                    accumulate(&mut grads, *input, needs(input).then_some(dx));
                    accumulate(&mut grads, *weight, needs(weight).then_some(dw));
                    accumulate(&mut grads, *bias, needs(bias).then_some(db));
                }
                Op::SoftmaxCrossEntropy { logits, label, probs } => {
                    let dz = kernels::softmax_cross_entropy_backward(probs, *label, g.data()[0]);
                    accumulate(&mut grads, *logits, Some(dz));
                }
                Op::Add { a, b } => {
                    if needs(a) {
                        accumulate(&mut grads, *a, Some(g.clone()));
                    }
                    accumulate(&mut grads, *b, needs(b).then_some(g));
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *input, Some(g.map(|x| x * f)));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], var: Var, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
