//! Operation tape: forward recording and reverse-mode backward.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{CoreError, Result};

use super::ops;
use super::Tensor;

/// Probabilities this close to zero are clamped before `ln` in the
/// negative-log-likelihood ops, so saturated softmax never yields -inf.
pub const LOG_CLAMP: f64 = 1e-12;

pub(crate) enum Op {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, k: f64 },
    Conv2d(ops::ConvArgs),
    MaxPool2d { x: Tensor, argmax: Vec<usize> },
    Relu { x: Tensor },
    Softplus { x: Tensor },
    /// Per-pixel softmax over the channel axis; output saved for backward.
    ChannelSoftmax { x: Tensor },
    Sum { x: Tensor },
    /// Sum of -log p(class) over an explicit sparse pixel set.
    NllSparse {
        probs: Tensor,
        entries: Vec<(usize, usize, u8)>,
    },
    /// Sum of -log p(class) over every pixel of a dense target map.
    NllDense { probs: Tensor, targets: Vec<u8> },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Ordered record of executed operations.
///
/// Every op method validates its inputs, computes the forward result,
/// records a node, and hands back the output tensor. An op appears on the
/// tape after every op producing its inputs, so a single reverse sweep in
/// [`Tape::backward`] visits each node exactly once with its output
/// gradient complete.
///
/// A tape is confined to one worker; drop it to release the recorded
/// activations (parameters survive through their own handles).
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn record(&self, op: Op, values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        let requires_grad = op_inputs(&op).iter().any(|t| t.requires_grad());
        let out = Tensor::fresh(values, shape, requires_grad);
        self.nodes.borrow_mut().push(Node {
            op,
            out: out.clone(),
        });
        out
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let values = ops::zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.record(
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            values,
            a.shape(),
        ))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let values = ops::zip_same_shape("sub", a, b, |x, y| x - y)?;
        Ok(self.record(
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
            },
            values,
            a.shape(),
        ))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let values = ops::zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.record(
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
            values,
            a.shape(),
        ))
    }

    /// Multiply every element by the scalar `k`.
    pub fn scale(&self, a: &Tensor, k: f64) -> Result<Tensor> {
        let values = a.values().iter().map(|x| x * k).collect();
        Ok(self.record(Op::Scale { a: a.clone(), k }, values, a.shape()))
    }

    // ---- structured ops ---------------------------------------------------

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x` is NCHW, `w` is OIKK (square kernel), `bias` has one entry per
    /// output channel. Gradients propagate to `x`, `w`, and `bias`.
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        let args = ops::ConvArgs::new(x, w, bias, stride, padding, dilation)?;
        let (values, shape) = ops::conv2d_forward(&args);
        Ok(self.record(Op::Conv2d(args), values, shape))
    }

    /// Max pooling with a 2x2 window and stride 2. Spatial extents must be
    /// even; gradient routes to the argmax (first index on ties).
    pub fn max_pool2d(&self, x: &Tensor) -> Result<Tensor> {
        let (values, shape, argmax) = ops::max_pool2d_forward(x)?;
        Ok(self.record(
            Op::MaxPool2d {
                x: x.clone(),
                argmax,
            },
            values,
            shape,
        ))
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().iter().map(|v| v.max(0.0)).collect();
        Ok(self.record(Op::Relu { x: x.clone() }, values, x.shape()))
    }

    /// Smooth positive rectifier ln(1 + e^x). Unlike `relu` it has no
    /// zero-gradient region, so an output head using it cannot get stuck
    /// emitting all zeros.
    pub fn softplus(&self, x: &Tensor) -> Result<Tensor> {
        let values = x
            .values()
            .iter()
            .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        Ok(self.record(Op::Softplus { x: x.clone() }, values, x.shape()))
    }

    /// Per-pixel two-way softmax over the channel axis of an (N,2,H,W)
    /// tensor, computed with max-subtraction. Errors when C != 2.
    pub fn channel_softmax(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 2 {
            return Err(CoreError::invalid(format!(
                "channel_softmax requires exactly 2 channels, got {}",
                c
            )));
        }
        self.channel_softmax_multi(x)
    }

    /// Per-pixel softmax over an arbitrary channel count (the multi-class
    /// segmentation variant). `channel_softmax` is the two-channel case.
    pub fn channel_softmax_multi(&self, x: &Tensor) -> Result<Tensor> {
        let values = ops::channel_softmax_forward(x)?;
        Ok(self.record(Op::ChannelSoftmax { x: x.clone() }, values, x.shape()))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.values().iter().sum();
        Ok(self.record(Op::Sum { x: x.clone() }, vec![total], vec![1]))
    }

    /// Sum of `-ln p(class s at (i,j))` over the given sparse entries, on a
    /// (1,C,H,W) posterior tensor. Probabilities are clamped at
    /// [`LOG_CLAMP`] before the log. An empty entry list yields 0.
    pub fn nll_sparse(&self, probs: &Tensor, entries: &[(usize, usize, u8)]) -> Result<Tensor> {
        let total = ops::nll_sparse_forward(probs, entries)?;
        Ok(self.record(
            Op::NllSparse {
                probs: probs.clone(),
                entries: entries.to_vec(),
            },
            vec![total],
            vec![1],
        ))
    }

    /// Sum of `-ln p(target class)` over every pixel of a (1,C,H,W)
    /// posterior tensor; `targets` holds one class index per pixel.
    pub fn nll_dense(&self, probs: &Tensor, targets: &[u8]) -> Result<Tensor> {
        let total = ops::nll_dense_forward(probs, targets)?;
        Ok(self.record(
            Op::NllDense {
                probs: probs.clone(),
                targets: targets.to_vec(),
            },
            vec![total],
            vec![1],
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    ///
    /// Populates the gradient slot of every `requires_grad` tensor recorded
    /// on this tape: tensors reachable from `loss` receive d(loss)/d(tensor),
    /// the rest are reset to absent. Two sweeps over the same tape produce
    /// bit-identical gradients; accumulation follows tape order only.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(CoreError::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();

        for node in nodes.iter() {
            if node.out.requires_grad() {
                node.out.set_grad(None);
            }
            for input in op_inputs(&node.op) {
                if input.requires_grad() {
                    input.set_grad(None);
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        for node in nodes.iter().rev() {
            let gout = match grads.remove(&node.out.id()) {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&node.op, &gout, &mut grads);
            if node.out.requires_grad() {
                node.out.set_grad(Some(gout));
            }
        }

        // What is left in the table belongs to leaves (parameters, inputs).
        for node in nodes.iter() {
            for input in op_inputs(&node.op) {
                if input.requires_grad() {
                    if let Some(g) = grads.get(&input.id()) {
                        input.set_grad(Some(g.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether a central finite difference with step `eps` is trustworthy
    /// on this tape: no ReLU pre-activation sits within `eps` of the kink
    /// and no pooling window has a near-tie that a bump could flip.
    pub fn fd_safe(&self, eps: f64) -> bool {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu { x } => {
                    if x.values().iter().any(|v| v.abs() <= eps) {
                        return false;
                    }
                }
                Op::MaxPool2d { x, .. } => {
                    if !ops::pool_windows_separated(x, 2.0 * eps) {
                        return false;
                    }
                }
                _ => {}
            }
        }
        true
    }
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![a, b],
        Op::Scale { a, .. } => vec![a],
        Op::Conv2d(args) => vec![&args.x, &args.w, &args.bias],
        Op::MaxPool2d { x, .. } => vec![x],
        Op::Relu { x } | Op::Softplus { x } => vec![x],
        Op::ChannelSoftmax { x } => vec![x],
        Op::Sum { x } => vec![x],
        Op::NllSparse { probs, .. } => vec![probs],
        Op::NllDense { probs, .. } => vec![probs],
    }
}

/// Add `contrib` into the gradient table entry for `t`, creating it at
/// zero first. Skips tensors that do not require grad: constants terminate
/// gradient flow, which is also how detached targets stay fixed.
fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, contrib: &[f64]) {
    if !t.requires_grad() {
        return;
    }
    let entry = grads
        .entry(t.id())
        .or_insert_with(|| vec![0.0; t.numel()]);
    for (e, c) in entry.iter_mut().zip(contrib) {
        *e += c;
    }
}

fn backprop_node(op: &Op, gout: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match op {
        Op::Add { a, b } => {
            accumulate(grads, a, gout);
            accumulate(grads, b, gout);
        }
        Op::Sub { a, b } => {
            accumulate(grads, a, gout);
            if b.requires_grad() {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                accumulate(grads, b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let bv = b.values();
                let da: Vec<f64> = gout.iter().zip(bv.iter()).map(|(g, y)| g * y).collect();
                accumulate(grads, a, &da);
            }
            if b.requires_grad() {
                let av = a.values();
                let db: Vec<f64> = gout.iter().zip(av.iter()).map(|(g, x)| g * x).collect();
                accumulate(grads, b, &db);
            }
        }
        Op::Scale { a, k } => {
            if a.requires_grad() {
                let da: Vec<f64> = gout.iter().map(|g| g * k).collect();
                accumulate(grads, a, &da);
            }
        }
        Op::Conv2d(args) => {
            let (dx, dw, db) = ops::conv2d_backward(args, gout);
            if let Some(dx) = dx {
                accumulate(grads, &args.x, &dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, &args.w, &dw);
            }
            if let Some(db) = db {
                accumulate(grads, &args.bias, &db);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for (out_idx, &src) in argmax.iter().enumerate() {
                    dx[src] += gout[out_idx];
                }
                accumulate(grads, x, &dx);
            }
        }
        Op::Relu { x } => {
            if x.requires_grad() {
                let xv = x.values();
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(xv.iter())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::Softplus { x } => {
            if x.requires_grad() {
                let xv = x.values();
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(xv.iter())
                    .map(|(g, v)| g / (1.0 + (-v).exp()))
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::ChannelSoftmax { x } => {
            if x.requires_grad() {
                // Note: needs the forward output; recompute it (cheap and
                // avoids holding a second handle in the op).
                let probs = ops::channel_softmax_forward(x).expect("shape validated at record");
                let dx = ops::channel_softmax_backward(x, &probs, gout)
                    .expect("shape validated at record");
                accumulate(grads, x, &dx);
            }
        }
        Op::Sum { x } => {
            if x.requires_grad() {
                let dx = vec![gout[0]; x.numel()];
                accumulate(grads, x, &dx);
            }
        }
        Op::NllSparse { probs, entries } => {
            if probs.requires_grad() {
                let dp = ops::nll_backward(probs, entries.iter().copied(), gout[0]);
                accumulate(grads, probs, &dp);
            }
        }
        Op::NllDense { probs, targets } => {
            if probs.requires_grad() {
                let (_, _, h, w) = probs.dims4().expect("shape validated at record");
                let entries = targets
                    .iter()
                    .enumerate()
                    .map(|(p, &cls)| (p / w, p % w, cls));
                let _ = h;
                let dp = ops::nll_backward(probs, entries, gout[0]);
                accumulate(grads, probs, &dp);
            }
        }
    }
}
