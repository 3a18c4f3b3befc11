//! Reverse-mode autodiff tape.
//!
//! Ops append nodes in topological order; [`Tape::backward`] walks the
//! nodes in reverse exactly once, accumulating gradients additively across
//! fan-out. A tape is single-use: calling `backward` twice is an error.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use super::conv::{self, ConvDims};
use super::{same_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

const BN_EPS: f64 = 1e-5;

/// Extension point for ops with hand-written backward rules (quantizers,
/// losses). The forward result is used verbatim; no autodiff happens
/// through it.
pub trait CustomOp {
    fn name(&self) -> &str;
    /// Compute the output from input values.
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Map the upstream gradient to per-input gradients (`None` for inputs
    /// that receive no gradient). Entries must match input shapes.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

struct BnSaved {
    mean: Vec<f64>,
    var: Vec<f64>,
}

enum Op {
    Leaf,
    Reshape { x: TensorRef },
    Matmul { a: TensorRef, b: TensorRef },
    Conv2d { x: TensorRef, w: TensorRef, dims: ConvDims },
    Relu { x: TensorRef },
    Add { a: TensorRef, b: TensorRef },
    Sub { a: TensorRef, b: TensorRef },
    Mul { a: TensorRef, b: TensorRef },
    Scale { x: TensorRef, factor: f64 },
    AddScalar { x: TensorRef },
    Neg { x: TensorRef },
    AddBias { x: TensorRef, bias: TensorRef, axis: usize },
    MaxPool2 { x: TensorRef },
    MaxOverAxis { x: TensorRef, axis: usize },
    Mean { x: TensorRef },
    Sum { x: TensorRef },
    BatchNorm { x: TensorRef, gamma: TensorRef, beta: TensorRef, saved: Box<BnSaved>, train: bool },
    IndexAxis1 { x: TensorRef, part: usize },
    Stack1 { parts: Vec<TensorRef> },
    HorizontalPool { x: TensorRef, parts: usize },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<TensorRef> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Single-use reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorRef {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> TensorRef {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    /// Gradient of a node after `backward`, if one was accumulated.
    pub fn grad(&self, r: TensorRef) -> Option<&Tensor> {
        self.nodes[r.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, r: TensorRef) -> bool {
        self.nodes[r.0].needs_grad
    }

    // ── built-in ops ─────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let v = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape { x }, needs))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {k} vs {k2}"
            )));
        }
        let out = matmul_nn(av.data(), bv.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out),
            Op::Matmul { a, b },
            needs,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        stride: usize,
        padding: usize,
    ) -> Result<TensorRef> {
        let dims = conv::conv_dims(
            self.value(x).shape(),
            self.value(w).shape(),
            stride,
            padding,
        )?;
        let out = conv::forward(self.value(x).data(), self.value(w).data(), &dims);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::from_vec(vec![dims.n, dims.co, dims.ho, dims.wo], out),
            Op::Conv2d { x, w, dims },
            needs,
        ))
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out), Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: TensorRef, factor: f64) -> TensorRef {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out), Op::Scale { x, factor }, needs)
    }

    pub fn add_scalar(&mut self, x: TensorRef, offset: f64) -> TensorRef {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v + offset).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out), Op::AddScalar { x }, needs)
    }

    pub fn neg(&mut self, x: TensorRef) -> TensorRef {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| -v).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out), Op::Neg { x }, needs)
    }

    /// Add a 1-D bias along `axis` of `x` (the only broadcast form the
    /// network needs).
    pub fn add_bias(&mut self, x: TensorRef, bias: TensorRef, axis: usize) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape();
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not match axis {axis} of {:?}",
                bs, xs
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let b = bd[m];
                out.extend(xd[base..base + inner].iter().map(|&v| v + b));
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::from_vec(xs, out),
            Op::AddBias { x, bias, axis },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2 on `[n, c, h, w]`; extents must be even.
    pub fn maxpool2(&mut self, x: TensorRef) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2 expects [n,c,h,w] with even h, w; got {:?}",
                xs
            )));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * ho * wo];
        for pl in 0..planes {
            let xp = &xd[pl * h * w..(pl + 1) * h * w];
            let op_ = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
            for y in 0..ho {
                for xcol in 0..wo {
                    let mut best = xp[2 * y * w + 2 * xcol];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = xp[(2 * y + dy) * w + 2 * xcol + dx];
                        if v > best {
                            best = v;
                        }
                    }
                    op_[y * wo + xcol] = best;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![xs[0], xs[1], ho, wo], out),
            Op::MaxPool2 { x },
            needs,
        ))
    }

    /// Elementwise max over one axis; ties break toward the lowest index
    /// and the backward routes gradient only to the winner.
    pub fn max_over_axis(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::Dimension(format!(
                "max_over_axis: invalid axis {axis} for shape {:?}",
                xs
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * len * inner + i];
                for j in 1..len {
                    let v = xd[(o * len + j) * inner + i];
                    if v > best {
                        best = v;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        let mut oshape = xs.clone();
        oshape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(oshape, out),
            Op::MaxOverAxis { x, axis },
            needs,
        ))
    }

    /// Mean of all elements (rank-0 output).
    pub fn mean(&mut self, x: TensorRef) -> TensorRef {
        let xd = self.value(x).data();
        let m = xd.iter().sum::<f64>() / xd.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, needs)
    }

    /// Sum of all elements (rank-0 output).
    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let s = self.value(x).data().iter().sum::<f64>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// Batch norm over `[n, feat]` with batch statistics (training mode).
    /// Returns the output plus the batch mean/variance so callers can
    /// maintain running statistics. n must be >= 2.
    pub fn batch_norm_train(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
    ) -> Result<(TensorRef, Vec<f64>, Vec<f64>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "batch_norm expects [n, features], got {:?}",
                xs
            )));
        }
        let (n, feat) = (xs[0], xs[1]);
        if n < 2 {
            return Err(Error::Numeric(
                "batch_norm in training mode needs batch size >= 2".into(),
            ));
        }
        self.check_bn_params(feat, gamma, beta)?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; feat];
        for r in 0..n {
            for f in 0..feat {
                mean[f] += xd[r * feat + f];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; feat];
        for r in 0..n {
            for f in 0..feat {
                let d = xd[r * feat + f] - mean[f];
                var[f] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let out = bn_apply(xd, n, feat, &mean, &var, self.value(gamma).data(), self.value(beta).data());
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let saved = Box::new(BnSaved {
            mean: mean.clone(),
            var: var.clone(),
        });
        let r = self.push(
            Tensor::from_vec(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train: true,
            },
            needs,
        );
        Ok((r, mean, var))
    }

    /// Batch norm over `[n, feat]` with fixed running statistics
    /// (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "batch_norm expects [n, features], got {:?}",
                xs
            )));
        }
        let (n, feat) = (xs[0], xs[1]);
        if running_mean.len() != feat || running_var.len() != feat {
            return Err(Error::Dimension(
                "batch_norm: running statistics length mismatch".into(),
            ));
        }
        self.check_bn_params(feat, gamma, beta)?;
        let out = bn_apply(
            self.value(x).data(),
            n,
            feat,
            running_mean,
            running_var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let saved = Box::new(BnSaved {
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
        });
        Ok(self.push(
            Tensor::from_vec(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train: false,
            },
            needs,
        ))
    }

    fn check_bn_params(&self, feat: usize, gamma: TensorRef, beta: TensorRef) -> Result<()> {
        for (name, r) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(r).shape();
            if s.len() != 1 || s[0] != feat {
                return Err(Error::Dimension(format!(
                    "batch_norm: {name} must have shape [{feat}], got {:?}",
                    s
                )));
            }
        }
        Ok(())
    }

    /// Select part `j` from `[b, p, c]`, yielding `[b, c]`.
    pub fn index_axis1(&mut self, x: TensorRef, part: usize) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || part >= xs[1] {
            return Err(Error::Dimension(format!(
                "index_axis1: part {part} invalid for shape {:?}",
                xs
            )));
        }
        let (b, p, c) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for ib in 0..b {
            let base = (ib * p + part) * c;
            out.extend_from_slice(&xd[base..base + c]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![b, c], out),
            Op::IndexAxis1 { x, part },
            needs,
        ))
    }

    /// Stack `[b, c]` tensors into `[b, p, c]` along a new middle axis.
    pub fn stack1(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Usage("stack1: empty part list".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(Error::Dimension(format!(
                "stack1 expects [b, c] parts, got {:?}",
                first
            )));
        }
        for &r in parts {
            if self.value(r).shape() != first.as_slice() {
                return Err(Error::Dimension("stack1: part shapes differ".into()));
            }
        }
        let (b, c) = (first[0], first[1]);
        let p = parts.len();
        let mut out = vec![0.0; b * p * c];
        for (j, &r) in parts.iter().enumerate() {
            let d = self.value(r).data();
            for ib in 0..b {
                out[(ib * p + j) * c..(ib * p + j) * c + c].copy_from_slice(&d[ib * c..(ib + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&r| self.needs(r));
        Ok(self.push(
            Tensor::from_vec(vec![b, p, c], out),
            Op::Stack1 {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Part-based pooling: split the height of `[b, c, h, w]` into `p`
    /// strips and emit per-strip max + mean, yielding `[b, p, c]`.
    pub fn horizontal_pool(&mut self, x: TensorRef, parts: usize) -> Result<TensorRef> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!(
                "horizontal_pool expects [b, c, h, w], got {:?}",
                xs
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if parts == 0 || h % parts != 0 {
            return Err(Error::Config(format!(
                "horizontal_pool: {parts} parts do not divide height {h}"
            )));
        }
        let hs = h / parts;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * parts * c];
        for ib in 0..b {
            for ic in 0..c {
                let plane = &xd[(ib * c + ic) * h * w..(ib * c + ic + 1) * h * w];
                for sp in 0..parts {
                    let strip = &plane[sp * hs * w..(sp + 1) * hs * w];
                    let mut mx = strip[0];
                    let mut sum = 0.0;
                    for &v in strip {
                        if v > mx {
                            mx = v;
                        }
                        sum += v;
                    }
                    out[(ib * parts + sp) * c + ic] = mx + sum / strip.len() as f64;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![b, parts, c], out),
            Op::HorizontalPool { x, parts },
            needs,
        ))
    }

    /// Record a custom op. The backward rule is the op's, verbatim.
    pub fn apply_custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: &[TensorRef],
    ) -> Result<TensorRef> {
        let values: Vec<&Tensor> = inputs.iter().map(|&r| self.value(r)).collect();
        let out = op.forward(&values)?;
        let needs = inputs.iter().any(|&r| self.needs(r));
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Elementwise custom op from a forward closure and a backward closure
    /// mapping (upstream gradient, saved input) to the input gradient.
    pub fn custom_unary(
        &mut self,
        x: TensorRef,
        forward_fn: impl Fn(f64) -> f64 + 'static,
        backward_fn: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<TensorRef> {
        struct ClosureUnary<F, B> {
            f: F,
            b: B,
        }
        impl<F: Fn(f64) -> f64, B: Fn(f64, f64) -> f64> CustomOp for ClosureUnary<F, B> {
            fn name(&self) -> &str {
                "custom_unary"
            }
            fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
                let x = inputs[0];
                let out: Vec<f64> = x.data().iter().map(|&v| (self.f)(v)).collect();
                Ok(Tensor::from_vec(x.shape().to_vec(), out))
            }
            fn backward(
                &self,
                grad_out: &[f64],
                inputs: &[&Tensor],
                _output: &Tensor,
            ) -> Vec<Option<Tensor>> {
                let x = inputs[0];
                let gx: Vec<f64> = grad_out
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| (self.b)(g, v))
                    .collect();
                vec![Some(Tensor::from_vec(x.shape().to_vec(), gx))]
            }
        }
        self.apply_custom(
            Box::new(ClosureUnary {
                f: forward_fn,
                b: backward_fn,
            }),
            &[x],
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// grad-requiring node reachable from `loss`. Strict single-use: a
    /// second call on the same tape is a usage error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let g = upper[0].as_ref().expect("checked above");
            self.dispatch_backward(id, g, lower);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g.map(|v| Tensor::from_vec(node.value.shape().to_vec(), v));
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: TensorRef,
        contribution: &[f64],
    ) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => {
                *slot = Some(contribution.to_vec());
            }
        }
    }

    fn accumulate_owned(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: TensorRef,
        contribution: Vec<f64>,
    ) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot => {
                *slot = Some(contribution);
            }
        }
    }

    fn dispatch_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Reshape { x } => self.accumulate(grads, *x, g),
            Op::Matmul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let ga = matmul_nt(g, bv.data(), m, n, k);
                    self.accumulate_owned(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = matmul_tn(av.data(), g, m, k, n);
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, dims } => {
                if self.needs(*x) {
                    let dx = conv::backward_input(self.value(*w).data(), g, dims);
                    self.accumulate_owned(grads, *x, dx);
                }
                if self.needs(*w) {
                    let dw = conv::backward_weight(self.value(*x).data(), g, dims);
                    self.accumulate_owned(grads, *w, dw);
                }
            }
            Op::Relu { x } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate_owned(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                if self.needs(*b) {
                    let gb: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    self.accumulate_owned(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::Scale { x, factor } => {
                let gx: Vec<f64> = g.iter().map(|&v| v * factor).collect();
                self.accumulate_owned(grads, *x, gx);
            }
            Op::AddScalar { x } => self.accumulate(grads, *x, g),
            Op::Neg { x } => {
                let gx: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate_owned(grads, *x, gx);
            }
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, *x, g);
                if self.needs(*bias) {
                    let xs = self.value(*x).shape();
                    let outer: usize = xs[..*axis].iter().product();
                    let mid = xs[*axis];
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let mut gb = vec![0.0; mid];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            gb[m] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate_owned(grads, *bias, gb);
                }
            }
            Op::MaxPool2 { x } => {
                let xs = self.value(*x).shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let xd = self.value(*x).data();
                let mut gx = vec![0.0; xd.len()];
                for pl in 0..planes {
                    let xp = &xd[pl * h * w..(pl + 1) * h * w];
                    let gp = &g[pl * ho * wo..(pl + 1) * ho * wo];
                    for y in 0..ho {
                        for xcol in 0..wo {
                            // first strict maximum in (0,0),(0,1),(1,0),(1,1) order
                            let mut best = xp[2 * y * w + 2 * xcol];
                            let mut arg = (0usize, 0usize);
                            for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                                let v = xp[(2 * y + dy) * w + 2 * xcol + dx];
                                if v > best {
                                    best = v;
                                    arg = (dy, dx);
                                }
                            }
                            gx[pl * h * w + (2 * y + arg.0) * w + 2 * xcol + arg.1] +=
                                gp[y * wo + xcol];
                        }
                    }
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::MaxOverAxis { x, axis } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let xd = self.value(*x).data();
                let mut gx = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xd[o * len * inner + i];
                        let mut arg = 0usize;
                        for j in 1..len {
                            let v = xd[(o * len + j) * inner + i];
                            if v > best {
                                best = v;
                                arg = j;
                            }
                        }
                        gx[(o * len + arg) * inner + i] += g[o * inner + i];
                    }
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let gi = g[0] / n as f64;
                self.accumulate_owned(grads, *x, vec![gi; n]);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate_owned(grads, *x, vec![g[0]; n]);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train,
            } => {
                let xs = self.value(*x).shape();
                let (n, feat) = (xs[0], xs[1]);
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let nf = n as f64;
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; feat];
                    for r in 0..n {
                        for f in 0..feat {
                            let xhat = (xd[r * feat + f] - saved.mean[f])
                                / crate::fmath::sqrt(saved.var[f] + BN_EPS);
                            gg[f] += g[r * feat + f] * xhat;
                        }
                    }
                    self.accumulate_owned(grads, *gamma, gg);
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; feat];
                    for r in 0..n {
                        for f in 0..feat {
                            gb[f] += g[r * feat + f];
                        }
                    }
                    self.accumulate_owned(grads, *beta, gb);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    if *train {
                        for f in 0..feat {
                            let inv_std = 1.0 / crate::fmath::sqrt(saved.var[f] + BN_EPS);
                            let mut g_mean = 0.0;
                            let mut gx_mean = 0.0;
                            for r in 0..n {
                                let xhat = (xd[r * feat + f] - saved.mean[f]) * inv_std;
                                g_mean += g[r * feat + f];
                                gx_mean += g[r * feat + f] * xhat;
                            }
                            g_mean /= nf;
                            gx_mean /= nf;
                            for r in 0..n {
                                let xhat = (xd[r * feat + f] - saved.mean[f]) * inv_std;
                                gx[r * feat + f] = gam[f]
                                    * inv_std
                                    * (g[r * feat + f] - g_mean - xhat * gx_mean);
                            }
                        }
                    } else {
                        for f in 0..feat {
                            let inv_std = 1.0 / crate::fmath::sqrt(saved.var[f] + BN_EPS);
                            for r in 0..n {
                                gx[r * feat + f] = g[r * feat + f] * gam[f] * inv_std;
                            }
                        }
                    }
                    self.accumulate_owned(grads, *x, gx);
                }
            }
            Op::IndexAxis1 { x, part } => {
                let xs = self.value(*x).shape();
                let (b, p, c) = (xs[0], xs[1], xs[2]);
                let mut gx = vec![0.0; b * p * c];
                for ib in 0..b {
                    gx[(ib * p + part) * c..(ib * p + part) * c + c]
                        .copy_from_slice(&g[ib * c..(ib + 1) * c]);
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::Stack1 { parts } => {
                let os = node.value.shape();
                let (b, p, c) = (os[0], os[1], os[2]);
                for (j, &r) in parts.iter().enumerate() {
                    if !self.needs(r) {
                        continue;
                    }
                    let mut gp = vec![0.0; b * c];
                    for ib in 0..b {
                        gp[ib * c..(ib + 1) * c]
                            .copy_from_slice(&g[(ib * p + j) * c..(ib * p + j) * c + c]);
                    }
                    self.accumulate_owned(grads, r, gp);
                }
            }
            Op::HorizontalPool { x, parts } => {
                let xs = self.value(*x).shape();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hs = h / parts;
                let strip_len = (hs * w) as f64;
                let xd = self.value(*x).data();
                let mut gx = vec![0.0; xd.len()];
                for ib in 0..b {
                    for ic in 0..c {
                        let base = (ib * c + ic) * h * w;
                        for sp in 0..*parts {
                            let go = g[(ib * parts + sp) * c + ic];
                            let strip = &xd[base + sp * hs * w..base + (sp + 1) * hs * w];
                            let mut arg = 0usize;
                            let mut mx = strip[0];
                            for (i, &v) in strip.iter().enumerate().skip(1) {
                                if v > mx {
                                    mx = v;
                                    arg = i;
                                }
                            }
                            let mean_g = go / strip_len;
                            let gslice = &mut gx[base + sp * hs * w..base + (sp + 1) * hs * w];
                            for gv in gslice.iter_mut() {
                                *gv += mean_g;
                            }
                            gslice[arg] += go;
                        }
                    }
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&r| self.value(r)).collect();
                let contributions = op.backward(g, &values, &node.value);
                debug_assert_eq!(contributions.len(), inputs.len());
                for (r, contrib) in inputs.iter().zip(contributions) {
                    if let Some(t) = contrib {
                        debug_assert_eq!(t.shape(), self.value(*r).shape(), "{}", op.name());
                        self.accumulate(grads, *r, t.data());
                    }
                }
            }
        }
    }
}

// ── small matmul kernels ─────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ  (rows of both operands are contiguous)
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + kk] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn bn_apply(
    x: &[f64],
    n: usize,
    feat: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for f in 0..feat {
        let inv_std = 1.0 / crate::fmath::sqrt(var[f] + BN_EPS);
        for r in 0..n {
            out[r * feat + f] = gamma[f] * (x[r * feat + f] - mean[f]) * inv_std + beta[f];
        }
    }
    out
}
