use super::conv::{conv2d_backward, conv2d_forward, gemm, Mat};
use super::ops::{self, BatchNormCache, RunningStats};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormOptions {
    pub mode: Mode,
    /// Weight kept by the running statistics on each update:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        BatchNormOptions {
            mode: Mode::Train,
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Handle to a node of a [`Graph`].
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
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    Relu(Var),
    Sigmoid(Var),
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Concat(Var, Var),
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
        w_pos: f64,
        w_neg: f64,
    },
    Sum(Var),
    Dot {
        input: Var,
        coefficients: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted; [`Graph::backward`] walks it in
/// reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(node: &mut Node, contribution: Vec<f64>) {
    match node.grad.as_mut() {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => node.grad = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if backprop reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros for a `requires_grad` node backprop did
    /// not reach, `None` for nodes that do not track gradients.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.requires_grad.then(|| match &node.grad {
            Some(g) => Tensor::new(node.value.dims().to_vec(), g.clone()).expect("grad dims"),
            None => Tensor::zeros(node.value.dims()),
        })
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.any_grad(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization. In train mode `stats` is updated in place with
    /// the batch statistics.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        options: BatchNormOptions,
    ) -> Result<Var> {
        let (out, cache) = ops::batchnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            stats,
            options.mode == Mode::Train,
            options.momentum,
            options.epsilon,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.dims(), |i| x.values()[i].max(0.0));
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.dims(), |i| ops::sigmoid(x.values()[i]));
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Sigmoid(input))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let out = ops::avg_pool_forward(self.value(input), window, stride)?;
        let rg = self.requires_grad(input);
        Ok(self.push(
            out,
            rg,
            Op::AvgPool {
                input,
                window,
                stride,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool_forward(self.value(input))?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, rg, Op::GlobalAvgPool(input)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_forward(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Concat(a, b)))
    }

    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.any_grad(&[input, weights, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Linear {
                input,
                weights,
                bias,
            },
        ))
    }

    /// Mean over the batch of the per-example summed binary cross-entropy
    /// `Σ_c -w_pos y_c ln p_c - w_neg (1 - y_c) ln(1 - p_c)`.
    ///
    /// `probs` is `[B, K]` and `targets` holds `B·K` values in `{0, 1}`.
    pub fn bce_loss(&mut self, probs: Var, targets: &[f64], w_pos: f64, w_neg: f64) -> Result<Var> {
        let p = self.value(probs);
        let [b, _k] = p.dims()[..] else {
            return Err(Error::shape(format!(
                "bce_loss expects [B, K] probabilities, got {:?}",
                p.dims()
            )));
        };
        if targets.len() != p.len() {
            return Err(Error::shape(format!(
                "bce_loss has {} probabilities but {} targets",
                p.len(),
                targets.len()
            )));
        }
        if b == 0 {
            return Err(Error::shape("bce_loss over an empty batch"));
        }
        let total: f64 = p
            .values()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| ops::bce_term(p, y, w_pos, w_neg).0)
            .sum();
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            rg,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                w_pos,
                w_neg,
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).values().iter().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), rg, Op::Sum(input))
    }

    /// Scalar `Σ_i c_i x_i` against constant coefficients.
    pub fn dot(&mut self, input: Var, coefficients: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != coefficients.len() {
            return Err(Error::shape(format!(
                "dot of {} values with {} coefficients",
                x.len(),
                coefficients.len()
            )));
        }
        let total = x
            .values()
            .iter()
            .zip(coefficients)
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::Dot {
                input,
                coefficients: coefficients.to_vec(),
            },
        ))
    }

    /// Reverse-mode pass from a scalar node. Gradients of leaves accumulate
    /// across calls until [`Graph::zero_grad`]; gradients of interior nodes
    /// are recomputed on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, node has {loss_len} values"
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backward_node(before, node, grad)?;
        }
        Ok(())
    }
}

fn backward_node(before: &mut [Node], node: &Node, grad: &[f64]) -> Result<()> {
    let needs = |before: &[Node], v: Var| before[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let need = (
                needs(before, *input),
                needs(before, *kernel),
                bias.is_some_and(|b| needs(before, b)),
            );
            let grads = conv2d_backward(
                &before[input.0].value,
                &before[kernel.0].value,
                grad,
                *stride,
                *padding,
                need,
            )?;
            if let Some(g) = grads.input {
                add_into(&mut before[input.0], g);
            }
            if let Some(g) = grads.kernel {
                add_into(&mut before[kernel.0], g);
            }
            if let (Some(b), Some(g)) = (bias, grads.bias) {
                add_into(&mut before[b.0], g);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            cache,
        } => {
            let (dx, dg, db) =
                ops::batchnorm_backward(node.value.dims(), &before[gamma.0].value, cache, grad);
            for (v, g) in [(*input, dx), (*gamma, dg), (*beta, db)] {
                if needs(before, v) {
                    add_into(&mut before[v.0], g);
                }
            }
        }
        Op::Relu(input) => {
            let x = before[input.0].value.values();
            let d: Vec<f64> = x
                .iter()
                .zip(grad)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            add_into(&mut before[input.0], d);
        }
        Op::Sigmoid(input) => {
            let d: Vec<f64> = node
                .value
                .values()
                .iter()
                .zip(grad)
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect();
            add_into(&mut before[input.0], d);
        }
        Op::AvgPool {
            input,
            window,
            stride,
        } => {
            let d = ops::avg_pool_backward(before[input.0].value.dims(), *window, *stride, grad);
            add_into(&mut before[input.0], d);
        }
        Op::GlobalAvgPool(input) => {
            let d = ops::global_avg_pool_backward(before[input.0].value.dims(), grad);
            add_into(&mut before[input.0], d);
        }
        Op::Concat(a, b) => {
            let (da, db) =
                ops::concat_backward(before[a.0].value.dims(), before[b.0].value.dims(), grad);
            if needs(before, *a) {
                add_into(&mut before[a.0], da);
            }
            if needs(before, *b) {
                add_into(&mut before[b.0], db);
            }
        }
        Op::Linear {
            input,
            weights,
            bias,
        } => {
            let (b, f, k) = ops::linear_check(
                &before[input.0].value,
                &before[weights.0].value,
                &before[bias.0].value,
            )?;
            if needs(before, *input) {
                let mut dx = vec![0.0; b * f];
                gemm(
                    b,
                    k,
                    f,
                    Mat::n(grad),
                    Mat::n(before[weights.0].value.values()),
                    0.0,
                    &mut dx,
                );
                add_into(&mut before[input.0], dx);
            }
            if needs(before, *weights) {
                let mut dw = vec![0.0; k * f];
                gemm(
                    k,
                    b,
                    f,
                    Mat::t(grad),
                    Mat::n(before[input.0].value.values()),
                    0.0,
                    &mut dw,
                );
                add_into(&mut before[weights.0], dw);
            }
            if needs(before, *bias) {
                let mut db = vec![0.0; k];
                for row in grad.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                add_into(&mut before[bias.0], db);
            }
        }
        Op::Bce {
            probs,
            targets,
            w_pos,
            w_neg,
        } => {
            let p = &before[probs.0].value;
            let scale = grad[0] / p.dims()[0] as f64;
            let d: Vec<f64> = p
                .values()
                .iter()
                .zip(targets)
                .map(|(&p, &y)| scale * ops::bce_term(p, y, *w_pos, *w_neg).1)
                .collect();
            add_into(&mut before[probs.0], d);
        }
        Op::Sum(input) => {
            let d = vec![grad[0]; before[input.0].value.len()];
            add_into(&mut before[input.0], d);
        }
        Op::Dot {
            input,
            coefficients,
        } => {
            let d: Vec<f64> = coefficients.iter().map(|c| c * grad[0]).collect();
            add_into(&mut before[input.0], d);
        }
    }
    Ok(())
}
