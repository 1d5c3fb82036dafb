//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. Nodes are stored in creation order, which is a
//! topological order, so `backward` is a single reverse sweep.

mod conv;
mod loss;
mod norm;

pub use norm::{BatchNormState, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm / forward mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var> },
    BatchNorm { input: Var, gamma: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool, beta: Var },
    LeakyRelu { input: Var, slope: T },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2 { input: Var },
    Concat { a: Var, b: Var },
    Softmax { input: Var },
    KlLoss { probs: Var, target: Vec<T> },
    SoftDice { probs: Var, target: Vec<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
}

/// Per-pixel channel softmax of a `[B, C, H, W]` tensor, outside any graph.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = scores.dims4()?;
    Tensor::new(&dims, loss::softmax(dims, scores.data()))
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// True when some requires_grad leaf feeds this node.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Remove the leaf tensors' gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value entering {what}")))
        }
    }

    /// 3×3 convolution, stride 1, zero padding 1. `bias` may be omitted.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [b, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin || kh != conv::K || kw != conv::K {
            return Err(Error::Config(format!(
                "conv2d weight {:?} does not fit input {:?} (expected [Cout,{cin},3,3])",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(Error::Config(format!(
                    "conv2d bias shape {:?} != [{cout}]",
                    self.value(bv).shape()
                )));
            }
        }
        self.check_finite(input, "conv2d")?;
        let dims = conv::ConvDims { b, cin, cout, h, w };
        let out = conv::forward(
            &dims,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
        );
        let tracked = self.tracked(input) || self.tracked(weight) || bias.is_some_and(|bv| self.tracked(bv));
        let value = Tensor::new(&[b, cout, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias }, tracked))
    }

    /// Per-channel normalization over (B, H, W). Train mode uses batch
    /// statistics and updates `state`; eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Config(format!("batch_norm affine parameters must have shape [{c}]")));
        }
        if state.channels() != c {
            return Err(Error::Config(format!(
                "batch_norm state tracks {} channels, input has {c}",
                state.channels()
            )));
        }
        let fwd = norm::forward(
            [b, c, h, w],
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
        )?;
        let tracked = self.tracked(input) || self.tracked(gamma) || self.tracked(beta);
        let value = Tensor::new(&[b, c, h, w], fwd.output)?;
        Ok(self.push(
            value,
            Op::BatchNorm { input, gamma, beta, xhat: fwd.xhat, inv_std: fwd.inv_std, train: mode == Mode::Train },
            tracked,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v >= T::ZERO { v } else { slope * v }).collect();
        let value = Tensor::new(x.shape(), data)?;
        let tracked = self.tracked(input);
        Ok(self.push(value, Op::LeakyRelu { input, slope }, tracked))
    }

    /// 2×2 max-pool, stride 2. Ties route to the first element in row-major order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("max_pool2 needs even extents, got {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let tracked = self.tracked(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, tracked))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = srow[ox / 2];
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let tracked = self.tracked(input);
        Ok(self.push(value, Op::Upsample2 { input }, tracked))
    }

    /// Channel concatenation, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Config(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            out.extend_from_slice(&xa[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&xb[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Concat { a, b }, tracked))
    }

    /// Per-pixel softmax across channels.
    pub fn softmax_channels(&mut self, scores: Var) -> Result<Var> {
        let dims = self.value(scores).dims4()?;
        let out = loss::softmax(dims, self.value(scores).data());
        let value = Tensor::new(&dims, out)?;
        let tracked = self.tracked(scores);
        Ok(self.push(value, Op::Softmax { input: scores }, tracked))
    }

    /// Mean over batch and pixels of `Σ_c t·(ln t − ln p)`.
    pub fn kl_loss(&mut self, target: &Tensor<T>, probs: Var) -> Result<Var> {
        self.check_loss_target(target, probs, "kl_loss")?;
        let dims = self.value(probs).dims4()?;
        let l = loss::kl(dims, target.data(), self.value(probs).data());
        if !l.is_finite() {
            return Err(Error::Numeric("kl_loss is not finite".into()));
        }
        let tracked = self.tracked(probs);
        Ok(self.push(Tensor::scalar(l), Op::KlLoss { probs, target: target.data().to_vec() }, tracked))
    }

    /// Mean over batch and foreground channels (1..C) of `1 − (2Σpg+ε)/(Σp²+Σg²+ε)`.
    pub fn soft_dice_loss(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_loss_target(target, probs, "soft_dice_loss")?;
        let dims = self.value(probs).dims4()?;
        if dims[1] < 2 {
            return Err(Error::Config("soft_dice_loss needs a background and at least one foreground channel".into()));
        }
        let l = loss::dice(dims, self.value(probs).data(), target.data());
        if !l.is_finite() {
            return Err(Error::Numeric("soft_dice_loss is not finite".into()));
        }
        let tracked = self.tracked(probs);
        Ok(self.push(Tensor::scalar(l), Op::SoftDice { probs, target: target.data().to_vec() }, tracked))
    }

    fn check_loss_target(&self, target: &Tensor<T>, probs: Var, what: &str) -> Result<()> {
        if target.shape() != self.value(probs).shape() {
            return Err(Error::Config(format!(
                "{what}: target {:?} vs probabilities {:?}",
                target.shape(),
                self.value(probs).shape()
            )));
        }
        if !target.all_finite() {
            return Err(Error::Numeric(format!("non-finite target entering {what}")));
        }
        self.check_finite(probs, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(Error::Config(format!("{what}: shapes {:?} and {:?} differ", xa.shape(), xb.shape())));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(xa.shape(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op(a, b), tracked))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let tracked = self.tracked(input);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, tracked))
    }

    /// Reverse sweep from a scalar node. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let t = &mut self.nodes[idx].value;
                if t.requires_grad {
                    match &mut t.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => t.grad = Some(g),
                    }
                }
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let [b, cin, h, w] = self.value(input).dims4()?;
                    let cout = self.value(weight).shape()[0];
                    let dims = conv::ConvDims { b, cin, cout, h, w };
                    let mut di = self.tracked(input).then(|| vec![T::ZERO; b * cin * h * w]);
                    let mut dw = self.tracked(weight).then(|| vec![T::ZERO; self.value(weight).numel()]);
                    let mut db = bias.filter(|&bv| self.tracked(bv)).map(|_| vec![T::ZERO; cout]);
                    conv::backward(
                        &dims,
                        self.value(input).data(),
                        self.value(weight).data(),
                        &g,
                        di.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    accumulate(&mut grads, input, di);
                    accumulate(&mut grads, weight, dw);
                    if let Some(bv) = bias {
                        accumulate(&mut grads, bv, db);
                    }
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                    let dims = self.value(*input).dims4()?;
                    let bw = norm::backward(dims, &g, xhat, inv_std, self.value(*gamma).data(), *train);
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    accumulate(&mut grads, input, Some(bw.dinput));
                    accumulate(&mut grads, gamma, Some(bw.dgamma));
                    accumulate(&mut grads, beta, Some(bw.dbeta));
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input).data();
                    let d = x.iter().zip(&g).map(|(&v, &gi)| if v >= T::ZERO { gi } else { *slope * gi }).collect();
                    let input = *input;
                    accumulate(&mut grads, input, Some(d));
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut d = vec![T::ZERO; self.value(*input).numel()];
                    for (&src, &gi) in argmax.iter().zip(&g) {
                        d[src as usize] += gi;
                    }
                    let input = *input;
                    accumulate(&mut grads, input, Some(d));
                }
                Op::Upsample2 { input } => {
                    let [b, c, h, w] = self.value(*input).dims4()?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut d = vec![T::ZERO; b * c * h * w];
                    for plane in 0..b * c {
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
                            }
                        }
                    }
                    let input = *input;
                    accumulate(&mut grads, input, Some(d));
                }
                Op::Concat { a, b } => {
                    let [bsz, ca, h, w] = self.value(*a).dims4()?;
                    let cb = self.value(*b).shape()[1];
                    let plane = h * w;
                    let mut da = Vec::with_capacity(bsz * ca * plane);
                    let mut db = Vec::with_capacity(bsz * cb * plane);
                    for bi in 0..bsz {
                        let base = bi * (ca + cb) * plane;
                        da.extend_from_slice(&g[base..base + ca * plane]);
                        db.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                    }
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, Some(da));
                    accumulate(&mut grads, b, Some(db));
                }
                Op::Softmax { input } => {
                    let dims = node.value.dims4()?;
                    let d = loss::softmax_backward(dims, node.value.data(), &g);
                    let input = *input;
                    accumulate(&mut grads, input, Some(d));
                }
                Op::KlLoss { probs, target } => {
                    let dims = self.value(*probs).dims4()?;
                    let d = loss::kl_backward(dims, target, self.value(*probs).data(), g[0]);
                    let probs = *probs;
                    accumulate(&mut grads, probs, Some(d));
                }
                Op::SoftDice { probs, target } => {
                    let dims = self.value(*probs).dims4()?;
                    let d = loss::dice_backward(dims, self.value(*probs).data(), target, g[0]);
                    let probs = *probs;
                    accumulate(&mut grads, probs, Some(d));
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, Some(g.clone()));
                    accumulate(&mut grads, b, Some(g));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = g.iter().zip(self.value(b).data()).map(|(&gi, &y)| gi * y).collect();
                    let db = g.iter().zip(self.value(a).data()).map(|(&gi, &x)| gi * x).collect();
                    accumulate(&mut grads, a, Some(da));
                    accumulate(&mut grads, b, Some(db));
                }
                Op::Sum { input } => {
                    let n = self.value(*input).numel();
                    let input = *input;
                    accumulate(&mut grads, input, Some(vec![g[0]; n]));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Option<Vec<T>>) {
    let Some(d) = d else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests;
