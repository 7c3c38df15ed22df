//! Tape-based reverse-mode differentiation over the kernel set in [`crate::kernels`].
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! reverse sweep simply walks it backwards.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, Mode, Padding, RunningStats};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        groups: usize,
        padding: Padding,
    },
    Elu(Var),
    AvgPool {
        x: Var,
        width: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<Real>,
        mode: Mode,
    },
    Dropout {
        x: Var,
        mask: Vec<Real>,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Set for trainable leaves; these are the keys of the gradient map.
    param: Option<String>,
}

/// Gradients keyed by parameter name, one entry per trainable leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every gradient entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.0.values().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// A named trainable leaf. Its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, Some(name.into()))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], context: &str) -> Result<Var> {
        value.ensure_finite(context)?;
        let needs_grad = self.needs(inputs);
        Ok(self.push(value, op, needs_grad, None))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.record(out, Op::Square(a), &[a], "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.record(out, Op::Sum(a), &[a], "sum")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        self.record(out, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn conv2d(&mut self, x: Var, k: Var, groups: usize, padding: Padding) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(k), groups, padding)?;
        self.record(out, Op::Conv2d { x, k, groups, padding }, &[x, k], "conv2d")
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::elu_forward(self.value(x));
        self.record(out, Op::Elu(x), &[x], "elu")
    }

    pub fn avg_pool(&mut self, x: Var, width: usize) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(x), width)?;
        self.record(out, Op::AvgPool { x, width }, &[x], "avg_pool")
    }

    /// Batch normalization over channel axis 1. In train mode the batch
    /// statistics are returned so the caller decides which running
    /// statistics absorb them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let out = kernels::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
            kernels::BN_EPS,
        )?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
            mode,
        };
        let var = self.record(out.y, op, &[x, gamma, beta], "batch_norm")?;
        Ok((var, out.batch))
    }

    /// Inverted dropout with a precomputed keep mask (entries are 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Vec<Real>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "dropout mask of {} entries for tensor {:?}",
                mask.len(),
                self.value(x).shape()
            )));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(self.value(x).shape(), data)?;
        self.record(out, Op::Dropout { x, mask }, &[x], "dropout")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.record(out, Op::Reshape(x), &[x], "reshape")
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.record(Tensor::scalar(loss), op, &[logits], "softmax_cross_entropy")
    }

    /// Reverse sweep from a scalar node. Every trainable leaf gets an entry;
    /// leaves not connected to `loss` get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, gi) in self.input_grads(node, &g)? {
                accumulate(&mut grads[input.0], gi);
            }
        }

        let mut out = GradientMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.needs_grad) {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, zip_map(g, vb, |g, y| g * y)));
                }
                if self.wants(*b) {
                    out.push((*b, zip_map(g, va, |g, x| g * x)));
                }
            }
            Op::Square(a) => {
                out.push((*a, zip_map(g, self.value(*a), |g, x| 2.0 * g * x)));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                out.push((*a, Tensor::full(self.value(*a).shape(), gv)));
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(self.value(*x), self.value(*w), g, self.wants(*x));
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    out.push((*w, gw));
                }
                if self.wants(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Conv2d { x, k, groups, padding } => {
                let (gx, gk) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    *groups,
                    *padding,
                    g,
                    self.wants(*x),
                    self.wants(*k),
                )?;
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gk) = gk {
                    out.push((*k, gk));
                }
            }
            Op::Elu(x) => {
                out.push((*x, kernels::elu_backward(self.value(*x), &node.value, g)));
            }
            Op::AvgPool { x, width } => {
                out.push((*x, kernels::avg_pool_backward(self.value(*x).shape(), *width, g)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (gx, ggamma, gbeta) = kernels::batch_norm_backward(xhat, inv_std, self.value(*gamma), *mode, g);
                if self.wants(*x) {
                    out.push((*x, gx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, ggamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, gbeta));
                }
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                out.push((*x, Tensor::new(g.shape(), data)?));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.value(*x).shape())?));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                out.push((
                    *logits,
                    kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0]),
                ));
            }
        }
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
