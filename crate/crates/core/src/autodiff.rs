//! Reverse-mode differentiation over a recorded list of tensor ops.
//!
//! Every op appends its output to the tape; [`Tape::backward`] walks the
//! records once in reverse. Besides ordinary gradients, the backward pass of
//! [`Tape::mask_scale`] keeps the per-sample gradient with respect to the
//! mask, which is what the pruning signals are built from.

use crate::error::{Error, Result, ShapeError};
use crate::tensor::{col2im, conv_out_extent, im2col, matmul_into, ConvGeometry, Mat, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: ValueId, weight: ValueId, bias: ValueId, geom: ConvGeometry, cols: Vec<T> },
    MaxPool2 { input: ValueId, argmax: Vec<u32> },
    Relu { input: ValueId },
    Linear { input: ValueId, weight: ValueId, bias: ValueId },
    MaskScale { input: ValueId, mask: ValueId },
    Reshape { input: ValueId },
    CrossEntropy { logits: ValueId, probs: Vec<f64>, targets: Vec<f64> },
    WeightedSum { input: ValueId, weights: Vec<T> },
}

/// Recorded forward computation.
pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    /// Exact (f64) value of every scalar loss recorded.
    loss_values: Vec<Option<f64>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
    /// Per-sample mask gradients `[N, K]`, indexed like `values`.
    mask_sample_grads: Vec<Option<Tensor<T>>>,
    inference: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            loss_values: Vec::new(),
            grads: None,
            mask_sample_grads: Vec::new(),
            inference: false,
        }
    }

    /// A tape that records values but keeps no intermediates for backward.
    pub fn inference() -> Self {
        Tape { inference: true, ..Self::new() }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad && !self.inference);
        self.loss_values.push(None);
        self.grads = None;
        id
    }

    /// Records a differentiable leaf (parameter, mask, or input to check).
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf whose gradient is never needed (data, labels).
    pub fn constant(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Loss value accumulated in 64-bit precision, if `id` is a loss.
    pub fn loss_value(&self, id: ValueId) -> Option<f64> {
        self.loss_values[id.0]
    }

    fn grad_flag(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(ShapeError::new(format!("conv2d expects [N,C,H,W] and [Co,Ci,K,K], got {xs:?} and {ws:?}")).into());
        }
        if xs[1] != ws[1] {
            return Err(ShapeError::new(format!("conv2d input has {} channels, weight expects {}", xs[1], ws[1])).into());
        }
        if bs != [ws[0]] {
            return Err(ShapeError::new(format!("conv2d bias shape {bs:?} does not match {} outputs", ws[0])).into());
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (oh, ow) = match (conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(ShapeError::new(format!(
                    "kernel {k} with stride {stride} and pad {pad} does not fit a {h}x{w} input"
                ))
                .into())
            }
        };
        let geom = ConvGeometry { cin, h, w, kernel: k, stride, pad, oh, ow };
        let (r, p) = (geom.col_rows(), geom.col_cols());
        let np = n * p;
        // columns of the whole batch side by side: [r, n * p]
        let mut cols = vec![T::zero(); r * np];
        let mut out = vec![T::zero(); n * cout * p];
        {
            let x = self.value(input).data();
            for s in 0..n {
                im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], &geom, &mut cols[s * p..], np);
            }
            let mut wide = vec![T::zero(); cout * np];
            matmul_into(Mat::new(self.value(weight).data(), cout, r), Mat::new(&cols, r, np), &mut wide, false);
            let b = self.value(bias).data();
            for s in 0..n {
                for c in 0..cout {
                    let src = &wide[c * np + s * p..c * np + (s + 1) * p];
                    let dst = &mut out[(s * cout + c) * p..(s * cout + c + 1) * p];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + b[c]);
                }
            }
        }
        if self.inference || !self.needs_grad[weight.0] {
            cols = Vec::new();
        }
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let ng = self.grad_flag(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, cols }, ng))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: ValueId) -> Result<ValueId> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(ShapeError::new(format!("maxpool2 expects [N,C,H,W], got {xs:?}")).into());
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::new(format!("maxpool2 needs even spatial extents, got {h}x{w}")).into());
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
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
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let ng = self.grad_flag(&[input]);
        if !ng || self.inference {
            argmax = Vec::new();
        }
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, ng))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.grad_flag(&[input]);
        self.push(value, Op::Relu { input }, ng)
    }

    /// `input [N, Cin]`, `weight [Cout, Cin]`, `bias [Cout]`.
    pub fn linear(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(ShapeError::new(format!(
                "linear expects [N,Cin], [Cout,Cin], [Cout]; got {xs:?}, {ws:?}, {bs:?}"
            ))
            .into());
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * cout);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        matmul_into(
            Mat::new(self.value(input).data(), n, cin),
            Mat::t(self.value(weight).data(), cout, cin),
            &mut out,
            true,
        );
        let value = Tensor::new(&[n, cout], out)?;
        let ng = self.grad_flag(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, ng))
    }

    /// Scales feature map `k` (axis 1) of `input` by `mask[k]`.
    pub fn mask_scale(&mut self, input: ValueId, mask: ValueId) -> Result<ValueId> {
        let xs = self.value(input).shape();
        let ms = self.value(mask).shape();
        if xs.len() < 2 || ms != [xs[1]] {
            return Err(ShapeError::new(format!("mask of shape {ms:?} does not fit activations {xs:?}")).into());
        }
        let k = xs[1];
        let inner: usize = xs[2..].iter().product();
        let m = self.value(mask).data();
        let mut value = self.value(input).clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let mk = m[i % k];
            // an all-ones mask leaves the forward pass bit-exact
            if mk != T::one() {
                chunk.iter_mut().for_each(|v| *v = *v * mk);
            }
        }
        let ng = self.grad_flag(&[input, mask]);
        Ok(self.push(value, Op::MaskScale { input, mask }, ng))
    }

    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId> {
        let value = self.value(input).clone().reshape(shape)?;
        let ng = self.grad_flag(&[input]);
        Ok(self.push(value, Op::Reshape { input }, ng))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.value(input).shape();
        let (n, rest) = (s[0], self.value(input).per_sample_len());
        self.reshape(input, &[n, rest])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(ShapeError::new(format!("logits {s:?} do not match {} labels", labels.len())).into());
        }
        let z = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= z) {
            return Err(Error::Input(format!("label {bad} outside [0, {z})")));
        }
        let mut targets = vec![0.0; labels.len() * z];
        for (row, &l) in labels.iter().enumerate() {
            targets[row * z + l] = 1.0;
        }
        self.cross_entropy_with_targets(logits, targets)
    }

    /// Mean over the batch of `-sum_z t_z log softmax(logits)_z` for target
    /// rows `t` (row-major `[N, Z]`). Targets need not be normalized.
    pub fn cross_entropy_with_targets(&mut self, logits: ValueId, targets: Vec<f64>) -> Result<ValueId> {
        let s = self.value(logits).shape();
        if s.len() != 2 || targets.len() != s[0] * s[1] {
            return Err(ShapeError::new(format!("targets of length {} do not match logits {s:?}", targets.len())).into());
        }
        if targets.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Input("targets must be finite and nonnegative".into()));
        }
        let (n, z) = (s[0], s[1]);
        let probs = softmax_rows(self.value(logits).data(), z);
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        for row in 0..n {
            let xr = &x[row * z..(row + 1) * z];
            let max = xr.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
            let lse = max + xr.iter().map(|v| (v.to_f64().unwrap() - max).exp()).sum::<f64>().ln();
            for (j, v) in xr.iter().enumerate() {
                let t = targets[row * z + j];
                if t != 0.0 {
                    total += t * (lse - v.to_f64().unwrap());
                }
            }
        }
        let loss = total / n as f64;
        let ng = self.grad_flag(&[logits]);
        let (probs, targets) = if ng { (probs, targets) } else { (Vec::new(), Vec::new()) };
        let id = self.push(Tensor::scalar(T::from_f64(loss)), Op::CrossEntropy { logits, probs, targets }, ng);
        self.loss_values[id.0] = Some(loss);
        Ok(id)
    }

    /// `sum_i weights_i * input_i`; handy for probing gradients of a single op.
    pub fn weighted_sum(&mut self, input: ValueId, weights: Vec<T>) -> Result<ValueId> {
        if weights.len() != self.value(input).len() {
            return Err(ShapeError::new("weighted_sum weights must match input length").into());
        }
        let total: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum();
        let ng = self.grad_flag(&[input]);
        let id = self.push(Tensor::scalar(T::from_f64(total)), Op::WeightedSum { input, weights }, ng);
        self.loss_values[id.0] = Some(total);
        Ok(id)
    }

    /// Runs reverse-mode differentiation from the scalar `root`.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.inference {
            return Err(Error::State("backward on an inference-only tape".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Input(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        let mut mask_grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            if !self.needs_grad[idx] {
                grads[idx] = Some(upstream);
                continue;
            }
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, geom, cols } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let n = upstream.shape()[0];
                    let cout = upstream.shape()[1];
                    let (r, p) = (geom.col_rows(), geom.col_cols());
                    let np = n * p;
                    let dout = upstream.data();
                    // upstream rearranged to [cout, n * p]
                    let mut wide = vec![T::zero(); cout * np];
                    for s in 0..n {
                        for c in 0..cout {
                            wide[c * np + s * p..c * np + (s + 1) * p]
                                .copy_from_slice(&dout[(s * cout + c) * p..(s * cout + c + 1) * p]);
                        }
                    }
                    if self.needs_grad[bias.0] {
                        let db: Vec<T> =
                            wide.chunks(np).map(|row| row.iter().fold(T::zero(), |a, &v| a + v)).collect();
                        accumulate(&mut grads, bias, Tensor::new(&[cout], db)?);
                    }
                    if self.needs_grad[weight.0] {
                        let mut dw = vec![T::zero(); cout * r];
                        matmul_into(Mat::new(&wide, cout, np), Mat::t(cols, r, np), &mut dw, false);
                        let shape = self.value(weight).shape().to_vec();
                        accumulate(&mut grads, weight, Tensor::new(&shape, dw)?);
                    }
                    if self.needs_grad[input.0] {
                        let plane = geom.cin * geom.h * geom.w;
                        let mut dcols = vec![T::zero(); r * np];
                        matmul_into(Mat::t(self.value(weight).data(), cout, r), Mat::new(&wide, cout, np), &mut dcols, false);
                        let mut dx = vec![T::zero(); n * plane];
                        for s in 0..n {
                            col2im(&dcols[s * p..], geom, &mut dx[s * plane..(s + 1) * plane], np);
                        }
                        let shape = self.value(input).shape().to_vec();
                        accumulate(&mut grads, input, Tensor::new(&shape, dx)?);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    if self.needs_grad[input.0] {
                        let mut dx = Tensor::zeros(self.value(input).shape());
                        let d = dx.data_mut();
                        for (&src, &g) in argmax.iter().zip(upstream.data()) {
                            d[src as usize] = d[src as usize] + g;
                        }
                        accumulate(&mut grads, input, dx);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    if self.needs_grad[input.0] {
                        let x = self.value(input).data();
                        let dx: Vec<T> = x
                            .iter()
                            .zip(upstream.data())
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect();
                        let shape = self.value(input).shape().to_vec();
                        accumulate(&mut grads, input, Tensor::new(&shape, dx)?);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (n, cout) = (upstream.shape()[0], upstream.shape()[1]);
                    let cin = self.value(weight).shape()[1];
                    let dout = upstream.data();
                    if self.needs_grad[bias.0] {
                        let mut db = vec![T::zero(); cout];
                        for row in dout.chunks(cout) {
                            db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                        }
                        accumulate(&mut grads, bias, Tensor::new(&[cout], db)?);
                    }
                    if self.needs_grad[weight.0] {
                        let mut dw = vec![T::zero(); cout * cin];
                        matmul_into(Mat::t(dout, n, cout), Mat::new(self.value(input).data(), n, cin), &mut dw, false);
                        accumulate(&mut grads, weight, Tensor::new(&[cout, cin], dw)?);
                    }
                    if self.needs_grad[input.0] {
                        let mut dx = vec![T::zero(); n * cin];
                        matmul_into(Mat::new(dout, n, cout), Mat::new(self.value(weight).data(), cout, cin), &mut dx, false);
                        accumulate(&mut grads, input, Tensor::new(&[n, cin], dx)?);
                    }
                }
                Op::MaskScale { input, mask } => {
                    let (input, mask) = (*input, *mask);
                    let xs = self.value(input).shape().to_vec();
                    let (n, k) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let a = self.value(input).data();
                    let m = self.value(mask).data();
                    let g = upstream.data();
                    if self.needs_grad[mask.0] {
                        let mut per_sample = vec![T::zero(); n * k];
                        for (i, slot) in per_sample.iter_mut().enumerate() {
                            let range = i * inner..(i + 1) * inner;
                            *slot = a[range.clone()]
                                .iter()
                                .zip(&g[range])
                                .fold(T::zero(), |acc, (&x, &u)| acc + x * u);
                        }
                        let mut total = vec![T::zero(); k];
                        for row in per_sample.chunks(k) {
                            total.iter_mut().zip(row).for_each(|(t, &v)| *t = *t + v);
                        }
                        accumulate(&mut grads, mask, Tensor::new(&[k], total)?);
                        let ps = Tensor::new(&[n, k], per_sample)?;
                        match &mut mask_grads[mask.0] {
                            Some(existing) => existing.add_assign(&ps),
                            slot => *slot = Some(ps),
                        }
                    }
                    if self.needs_grad[input.0] {
                        let mut dx = upstream.clone();
                        for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                            let mk = m[i % k];
                            chunk.iter_mut().for_each(|v| *v = *v * mk);
                        }
                        let dx = dx.reshape(&xs)?;
                        accumulate(&mut grads, input, dx);
                    }
                }
                Op::Reshape { input } => {
                    let input = *input;
                    if self.needs_grad[input.0] {
                        let shape = self.value(input).shape().to_vec();
                        accumulate(&mut grads, input, upstream.clone().reshape(&shape)?);
                    }
                }
                Op::CrossEntropy { logits, probs, targets } => {
                    let logits = *logits;
                    if self.needs_grad[logits.0] {
                        let shape = self.value(logits).shape().to_vec();
                        let (n, z) = (shape[0], shape[1]);
                        let seed = upstream.data()[0].to_f64().unwrap() / n as f64;
                        let mut dx = Vec::with_capacity(n * z);
                        for row in 0..n {
                            let t = &targets[row * z..(row + 1) * z];
                            let mass: f64 = t.iter().sum();
                            for j in 0..z {
                                let v = probs[row * z + j] * mass - t[j];
                                dx.push(T::from_f64(seed * v));
                            }
                        }
                        accumulate(&mut grads, logits, Tensor::new(&shape, dx)?);
                    }
                }
                Op::WeightedSum { input, weights } => {
                    let input = *input;
                    if self.needs_grad[input.0] {
                        let u = upstream.data()[0];
                        let shape = self.value(input).shape().to_vec();
                        let dx = weights.iter().map(|&w| w * u).collect();
                        accumulate(&mut grads, input, Tensor::new(&shape, dx)?);
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        self.grads = Some(grads);
        self.mask_sample_grads = mask_grads;
        Ok(())
    }

    pub fn has_gradients(&self) -> bool {
        self.grads.is_some()
    }

    /// Gradient of the last backward root with respect to `id`; values off
    /// the path to the root have a zero gradient.
    pub fn grad(&self, id: ValueId) -> Result<Tensor<T>> {
        let grads = self.grads.as_ref().ok_or_else(|| Error::State("no backward pass has run".into()))?;
        Ok(match &grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(id).shape()),
        })
    }

    pub fn grad_ref(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.as_ref().and_then(|g| g[id.0].as_ref())
    }

    /// Per-sample gradients `[N, K]` of the backward root with respect to the
    /// mask leaf `mask`. Summing over samples gives [`Tape::grad`].
    pub fn mask_grad_per_sample(&self, mask: ValueId) -> Result<&Tensor<T>> {
        if self.grads.is_none() {
            return Err(Error::State("no backward pass has run".into()));
        }
        self.mask_sample_grads
            .get(mask.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("value {} is not a mask on the backward path", mask.0)))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: ValueId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise softmax in f64 with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap()));
        let start = out.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v.to_f64().unwrap() - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}
