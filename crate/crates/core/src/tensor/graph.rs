//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every forward operation into an arena of nodes;
//! [`Graph::backward`] walks the arena in reverse, accumulating
//! gradients into the leaves that were created with `requires_grad`.
//! Tensors on the tape are never mutated after creation.

use super::conv;
use super::{ConvSpec, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: usize, w: usize, bias: Option<usize>, spec: ConvSpec },
    ConvTranspose { x: usize, w: usize, bias: Option<usize>, spec: ConvSpec },
    InstanceNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    BatchNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    SoftmaxChannels { x: usize },
    ConcatChannels { inputs: Vec<usize> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { x: usize },
    DiceLoss { probs: usize, target: Vec<u16>, eps: f64 },
    LoraDelta { a: usize, b: usize, scale: f64, kernel: Vec<usize>, c_out: usize, c_in: usize, transposed: bool },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    /// True when this node is a `requires_grad` leaf or depends on one.
    track: bool,
    op: Op,
}

/// Recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert an input tensor. Gradients are accumulated for it only
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call w.r.t. a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let node = &self.nodes[v.0];
        if node.requires_grad {
            node.grad.as_deref()
        } else {
            None
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, track: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, track, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].track)
    }

    /// N-D cross-correlation with stride and zero padding.
    pub fn conv_nd(&mut self, x: Var, w: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        if spec.transposed {
            return Err(Error::Usage("conv_nd called with a transposed spec".into()));
        }
        let out = conv::conv_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        let track = self.tracked(&inputs);
        Ok(self.push(out, false, track, Op::Conv { x: x.0, w: w.0, bias: bias.map(|b| b.0), spec: spec.clone() }))
    }

    /// N-D transposed convolution (decoder upsampling).
    pub fn conv_transpose_nd(&mut self, x: Var, w: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        if !spec.transposed {
            return Err(Error::Usage("conv_transpose_nd requires a transposed spec".into()));
        }
        let out = conv::conv_transpose_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        let track = self.tracked(&inputs);
        Ok(self.push(
            out,
            false,
            track,
            Op::ConvTranspose { x: x.0, w: w.0, bias: bias.map(|b| b.0), spec: spec.clone() },
        ))
    }

    fn norm_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.nodes[x.0].value.shape();
        if shape.len() < 3 {
            return Err(Error::dimension(
                shape.len(),
                "normalization expects [N, C, spatial...] with at least one spatial axis",
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].value.shape() != [c] {
                return Err(Error::Shape(format!(
                    "{} shape {:?}, expected [{}]",
                    name,
                    self.nodes[v.0].value.shape(),
                    c
                )));
            }
        }
        Ok((n, c, spatial))
    }

    /// Per-sample per-channel standardization followed by affine scale/shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, spatial) = self.norm_shapes(x, gamma, beta)?;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        for group in 0..n * c {
            let ch = group % c;
            let row = &xd[group * spatial..(group + 1) * spatial];
            let (mean, inv_std) = moments(row, eps);
            let out_row = &mut out[group * spatial..(group + 1) * spatial];
            for (o, &v) in out_row.iter_mut().zip(row) {
                *o = (v - mean) * inv_std * gd[ch] + bd[ch];
            }
        }
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), out)?;
        let track = self.tracked(&[x.0, gamma.0, beta.0]);
        Ok(self.push(value, false, track, Op::InstanceNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }))
    }

    /// Standardization per channel over batch and spatial positions.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, spatial) = self.norm_shapes(x, gamma, beta)?;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            let (mean, inv_std) = channel_moments(xd, n, c, spatial, ch, eps);
            for b in 0..n {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    out[base + s] = (xd[base + s] - mean) * inv_std * gd[ch] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), out)?;
        let track = self.tracked(&[x.0, gamma.0, beta.0]);
        Ok(self.push(value, false, track, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let track = self.nodes[x.0].track;
        self.push(value, false, track, Op::Relu { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let value = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { v * s });
        let track = self.nodes[x.0].track;
        self.push(value, false, track, Op::LeakyRelu { x: x.0, slope })
    }

    /// Softmax over the channel axis (axis 1) at every spatial position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() < 2 || shape[1] < 1 {
            return Err(Error::Shape(format!("softmax needs [N, C, ...], got {:?}", shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut max_buf = vec![T::zero(); spatial];
        let mut sum_buf = vec![T::zero(); spatial];
        for b in 0..n {
            let base = b * c * spatial;
            max_buf.copy_from_slice(&xd[base..base + spatial]);
            for ch in 1..c {
                let row = &xd[base + ch * spatial..base + (ch + 1) * spatial];
                for (m, &v) in max_buf.iter_mut().zip(row) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
            sum_buf.fill(T::zero());
            for ch in 0..c {
                let off = base + ch * spatial;
                for s in 0..spatial {
                    let e = (xd[off + s] - max_buf[s]).exp();
                    out[off + s] = e;
                    sum_buf[s] += e;
                }
            }
            for ch in 0..c {
                let off = base + ch * spatial;
                for s in 0..spatial {
                    out[off + s] /= sum_buf[s];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let track = self.nodes[x.0].track;
        Ok(self.push(value, false, track, Op::SoftmaxChannels { x: x.0 }))
    }

    /// Concatenate along the channel axis; all inputs share batch and
    /// spatial extents.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        let mut channels = 0usize;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::Shape(format!(
                    "concat inputs disagree: {:?} vs {:?}",
                    first, s
                )));
            }
            channels += s[1];
        }
        let n = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut shape = first.clone();
        shape[1] = channels;
        let mut out = vec![T::zero(); n * channels * spatial];
        for b in 0..n {
            let mut ch_off = 0usize;
            for v in inputs {
                let c_i = self.nodes[v.0].value.shape()[1];
                let src = self.nodes[v.0].value.data();
                let src_block = &src[b * c_i * spatial..(b + 1) * c_i * spatial];
                let dst_start = (b * channels + ch_off) * spatial;
                out[dst_start..dst_start + c_i * spatial].copy_from_slice(src_block);
                ch_off += c_i;
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let track = self.tracked(&ids);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, false, track, Op::ConcatChannels { inputs: ids }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn zip_elementwise(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("elementwise op on {:?} vs {:?}", sa, sb)));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let track = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, false, track, op))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for v in self.nodes[x.0].value.data() {
            acc += *v;
        }
        let track = self.nodes[x.0].track;
        self.push(Tensor::scalar(acc), false, track, Op::Sum { x: x.0 })
    }

    /// Soft Dice loss over foreground classes from channel probabilities.
    ///
    /// `probs` has shape `[N, K, spatial...]` (typically the output of
    /// [`Graph::softmax_channels`]); `target` holds one label id per
    /// `(n, spatial)` position. Class 0 is background and excluded from
    /// the mean. Loss = 1 - mean_k (2*sum(p_k*t_k) + eps) / (sum(p_k) + sum(t_k) + eps).
    pub fn dice_loss(&mut self, probs: Var, target: &[u16], eps: f64) -> Result<Var> {
        let shape = self.nodes[probs.0].value.shape().to_vec();
        if shape.len() < 3 {
            return Err(Error::Shape(format!("dice loss needs [N, K, spatial...], got {:?}", shape)));
        }
        let (n, k) = (shape[0], shape[1]);
        if k < 2 {
            return Err(Error::Usage(format!(
                "dice loss needs background plus at least one foreground class, got K={}",
                k
            )));
        }
        let spatial: usize = shape[2..].iter().product();
        if target.len() != n * spatial {
            return Err(Error::Shape(format!(
                "target has {} entries, expected {}",
                target.len(),
                n * spatial
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| (t as usize) >= k) {
            return Err(Error::Data(format!("label id {} out of range for {} classes", bad, k)));
        }
        let pd = self.nodes[probs.0].value.data();
        let terms = dice_terms(pd, target, n, k, spatial, eps);
        let fg = (k - 1) as f64;
        let loss = 1.0 - terms.iter().map(|t| t.term).sum::<f64>() / fg;
        let track = self.nodes[probs.0].track;
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            false,
            track,
            Op::DiceLoss { probs: probs.0, target: target.to_vec(), eps },
        ))
    }

    /// Low-rank weight update: for each kernel position `k`,
    /// `delta[:, :, k] = scale * A[k] * B[k]` with the result laid out in
    /// the layer's native weight order.
    pub fn lora_delta(
        &mut self,
        a: Var,
        b: Var,
        scale: f64,
        kernel: &[usize],
        c_out: usize,
        c_in: usize,
        transposed: bool,
    ) -> Result<Var> {
        let k_numel: usize = kernel.iter().product();
        let a_shape = self.nodes[a.0].value.shape();
        let b_shape = self.nodes[b.0].value.shape();
        let rank = if a_shape.len() >= 2 { a_shape[a_shape.len() - 1] } else { 0 };
        let mut expect_a = kernel.to_vec();
        expect_a.extend_from_slice(&[c_out, rank]);
        let mut expect_b = kernel.to_vec();
        expect_b.extend_from_slice(&[rank, c_in]);
        if a_shape != expect_a.as_slice() || b_shape != expect_b.as_slice() {
            return Err(Error::Shape(format!(
                "low-rank factors {:?} x {:?} do not match kernel {:?}, C_out {}, C_in {}",
                a_shape, b_shape, kernel, c_out, c_in
            )));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let s = T::from_f64(scale);
        let mut out = vec![T::zero(); c_out * c_in * k_numel];
        for kk in 0..k_numel {
            let a_blk = &ad[kk * c_out * rank..(kk + 1) * c_out * rank];
            let b_blk = &bd[kk * rank * c_in..(kk + 1) * rank * c_in];
            for o in 0..c_out {
                for i in 0..c_in {
                    let mut acc = T::zero();
                    for r in 0..rank {
                        acc += a_blk[o * rank + r] * b_blk[r * c_in + i];
                    }
                    let idx = if transposed {
                        (i * c_out + o) * k_numel + kk
                    } else {
                        (o * c_in + i) * k_numel + kk
                    };
                    out[idx] = acc * s;
                }
            }
        }
        let mut shape = if transposed { vec![c_in, c_out] } else { vec![c_out, c_in] };
        shape.extend_from_slice(kernel);
        let value = Tensor::new(shape, out)?;
        let track = self.tracked(&[a.0, b.0]);
        Ok(self.push(
            value,
            false,
            track,
            Op::LoraDelta { a: a.0, b: b.0, scale, kernel: kernel.to_vec(), c_out, c_in, transposed },
        ))
    }

    /// Accumulate `d(loss)/d(node)` into every tracked leaf reachable
    /// from `loss`. The loss must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].track {
                continue;
            }
            let Some(grad) = (if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad.clone()
            } else {
                self.nodes[i].grad.take()
            }) else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv { x, w, bias, spec } => {
                    let (x, w, bias, spec) = (*x, *w, *bias, spec.clone());
                    let (dx, dw, db) = conv::conv_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &spec,
                        &grad,
                        self.nodes[x].track,
                        self.nodes[w].track,
                        bias.map(|b| self.nodes[b].track).unwrap_or(false),
                    );
                    if let Some(dx) = dx {
                        self.accumulate(x, &dx);
                    }
                    if let Some(dw) = dw {
                        self.accumulate(w, &dw);
                    }
                    if let (Some(db), Some(b)) = (db, bias) {
                        self.accumulate(b, &db);
                    }
                }
                Op::ConvTranspose { x, w, bias, spec } => {
                    let (x, w, bias, spec) = (*x, *w, *bias, spec.clone());
                    let (dx, dw, db) = conv::conv_transpose_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &spec,
                        &grad,
                        self.nodes[x].track,
                        self.nodes[w].track,
                        bias.map(|b| self.nodes[b].track).unwrap_or(false),
                    );
                    if let Some(dx) = dx {
                        self.accumulate(x, &dx);
                    }
                    if let Some(dw) = dw {
                        self.accumulate(w, &dw);
                    }
                    if let (Some(db), Some(b)) = (db, bias) {
                        self.accumulate(b, &db);
                    }
                }
                Op::InstanceNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let shape = self.nodes[x].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let xd = self.nodes[x].value.data();
                    let gd = self.nodes[gamma].value.data();
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for group in 0..n * c {
                        let ch = group % c;
                        let row = &xd[group * spatial..(group + 1) * spatial];
                        let g_row = &grad[group * spatial..(group + 1) * spatial];
                        norm_group_backward(
                            row,
                            g_row,
                            gd[ch],
                            eps,
                            &mut dx[group * spatial..(group + 1) * spatial],
                            &mut dgamma[ch],
                            &mut dbeta[ch],
                        );
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::BatchNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let shape = self.nodes[x].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let xd = self.nodes[x].value.data();
                    let gd = self.nodes[gamma].value.data();
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    // Gather each channel into a contiguous scratch row, reuse
                    // the per-group backward, then scatter back.
                    let m = n * spatial;
                    let mut xrow = vec![T::zero(); m];
                    let mut grow = vec![T::zero(); m];
                    let mut dxrow = vec![T::zero(); m];
                    for ch in 0..c {
                        for b in 0..n {
                            let base = (b * c + ch) * spatial;
                            xrow[b * spatial..(b + 1) * spatial].copy_from_slice(&xd[base..base + spatial]);
                            grow[b * spatial..(b + 1) * spatial].copy_from_slice(&grad[base..base + spatial]);
                        }
                        dxrow.fill(T::zero());
                        norm_group_backward(&xrow, &grow, gd[ch], eps, &mut dxrow, &mut dgamma[ch], &mut dbeta[ch]);
                        for b in 0..n {
                            let base = (b * c + ch) * spatial;
                            dx[base..base + spatial].copy_from_slice(&dxrow[b * spatial..(b + 1) * spatial]);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dg: Vec<T> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(x, &dg);
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, T::from_f64(*slope));
                    let dg: Vec<T> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
                        .collect();
                    self.accumulate(x, &dg);
                }
                Op::SoftmaxChannels { x } => {
                    let x = *x;
                    let shape = self.nodes[i].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let p = self.nodes[i].value.data();
                    let mut dg = vec![T::zero(); p.len()];
                    let mut dot = vec![T::zero(); spatial];
                    for b in 0..n {
                        let base = b * c * spatial;
                        dot.fill(T::zero());
                        for ch in 0..c {
                            let off = base + ch * spatial;
                            for s in 0..spatial {
                                dot[s] += grad[off + s] * p[off + s];
                            }
                        }
                        for ch in 0..c {
                            let off = base + ch * spatial;
                            for s in 0..spatial {
                                dg[off + s] = p[off + s] * (grad[off + s] - dot[s]);
                            }
                        }
                    }
                    self.accumulate(x, &dg);
                }
                Op::ConcatChannels { inputs } => {
                    let inputs = inputs.clone();
                    let out_c = self.nodes[i].value.shape()[1];
                    let n = self.nodes[i].value.shape()[0];
                    let spatial: usize = self.nodes[i].value.shape()[2..].iter().product();
                    let mut ch_off = 0usize;
                    for inp in inputs {
                        let c_i = self.nodes[inp].value.shape()[1];
                        if self.nodes[inp].track {
                            let mut dg = vec![T::zero(); n * c_i * spatial];
                            for b in 0..n {
                                let src = (b * out_c + ch_off) * spatial;
                                let dst = b * c_i * spatial;
                                dg[dst..dst + c_i * spatial]
                                    .copy_from_slice(&grad[src..src + c_i * spatial]);
                            }
                            self.accumulate(inp, &dg);
                        }
                        ch_off += c_i;
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<T> = grad.iter().zip(self.nodes[b].value.data()).map(|(&g, &v)| g * v).collect();
                    let db: Vec<T> = grad.iter().zip(self.nodes[a].value.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let dg = vec![grad[0]; self.nodes[x].value.numel()];
                    self.accumulate(x, &dg);
                }
                Op::DiceLoss { probs, target: _, eps } => {
                    let (probs, eps) = (*probs, *eps);
                    let target = std::mem::take(
                        match &mut self.nodes[i].op {
                            Op::DiceLoss { target, .. } => target,
                            _ => unreachable!(),
                        },
                    );
                    let shape = self.nodes[probs].value.shape();
                    let (n, k) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let pd = self.nodes[probs].value.data();
                    let terms = dice_terms(pd, &target, n, k, spatial, eps);
                    let fg = (k - 1) as f64;
                    let g0 = grad[0].to_f64();
                    let mut dp = vec![T::zero(); pd.len()];
                    for b in 0..n {
                        for ch in 1..k {
                            let info = &terms[ch - 1];
                            let off = (b * k + ch) * spatial;
                            let t_off = b * spatial;
                            let scale = -g0 / fg / (info.den + eps);
                            for s in 0..spatial {
                                let t = if target[t_off + s] as usize == ch { 2.0 } else { 0.0 };
                                dp[off + s] = T::from_f64(scale * (t - info.term));
                            }
                        }
                    }
                    // restore the target buffer for potential re-runs
                    match &mut self.nodes[i].op {
                        Op::DiceLoss { target: slot, .. } => *slot = target,
                        _ => unreachable!(),
                    }
                    self.accumulate(probs, &dp);
                }
                Op::LoraDelta { a, b, scale, kernel, c_out, c_in, transposed } => {
                    let (a, b, scale) = (*a, *b, T::from_f64(*scale));
                    let (c_out, c_in, transposed) = (*c_out, *c_in, *transposed);
                    let k_numel: usize = kernel.iter().product();
                    let a_shape = self.nodes[a].value.shape();
                    let rank = a_shape[a_shape.len() - 1];
                    let ad = self.nodes[a].value.data();
                    let bd = self.nodes[b].value.data();
                    let mut da = vec![T::zero(); ad.len()];
                    let mut db = vec![T::zero(); bd.len()];
                    for kk in 0..k_numel {
                        let a_blk = &ad[kk * c_out * rank..(kk + 1) * c_out * rank];
                        let b_blk = &bd[kk * rank * c_in..(kk + 1) * rank * c_in];
                        for o in 0..c_out {
                            for ci in 0..c_in {
                                let idx = if transposed {
                                    (ci * c_out + o) * k_numel + kk
                                } else {
                                    (o * c_in + ci) * k_numel + kk
                                };
                                let g = grad[idx] * scale;
                                for r in 0..rank {
                                    da[kk * c_out * rank + o * rank + r] += g * b_blk[r * c_in + ci];
                                    db[kk * rank * c_in + r * c_in + ci] += g * a_blk[o * rank + r];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, src: &[T]) {
        if !self.nodes[idx].track {
            return;
        }
        let numel = self.nodes[idx].value.numel();
        debug_assert_eq!(numel, src.len());
        let grad = self.nodes[idx].grad.get_or_insert_with(|| vec![T::zero(); numel]);
        for (g, s) in grad.iter_mut().zip(src) {
            *g += *s;
        }
    }
}

fn moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let m = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for v in row {
        mean += *v;
    }
    mean /= m;
    let mut var = T::zero();
    for v in row {
        let d = *v - mean;
        var += d * d;
    }
    var /= m;
    (mean, (var + T::from_f64(eps)).sqrt().recip())
}

fn channel_moments<T: Scalar>(xd: &[T], n: usize, c: usize, spatial: usize, ch: usize, eps: f64) -> (T, T) {
    let m = T::from_f64((n * spatial) as f64);
    let mut mean = T::zero();
    for b in 0..n {
        let base = (b * c + ch) * spatial;
        for s in 0..spatial {
            mean += xd[base + s];
        }
    }
    mean /= m;
    let mut var = T::zero();
    for b in 0..n {
        let base = (b * c + ch) * spatial;
        for s in 0..spatial {
            let d = xd[base + s] - mean;
            var += d * d;
        }
    }
    var /= m;
    (mean, (var + T::from_f64(eps)).sqrt().recip())
}

/// Standardization backward for one group (shared by instance and batch
/// norm): accumulates into `dx`, `dgamma`, `dbeta`.
fn norm_group_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    gamma: T,
    eps: f64,
    dx: &mut [T],
    dgamma: &mut T,
    dbeta: &mut T,
) {
    let m = T::from_f64(x.len() as f64);
    let (mean, inv_std) = moments(x, eps);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for (&xv, &gv) in x.iter().zip(g) {
        let xhat = (xv - mean) * inv_std;
        let dxhat = gv * gamma;
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        *dgamma += gv * xhat;
        *dbeta += gv;
    }
    for ((&xv, &gv), d) in x.iter().zip(g).zip(dx.iter_mut()) {
        let xhat = (xv - mean) * inv_std;
        let dxhat = gv * gamma;
        *d += inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
    }
}

struct DiceTerm {
    term: f64,
    den: f64,
}

/// Per-foreground-class soft Dice terms, pooled over batch and spatial
/// positions.
fn dice_terms<T: Scalar>(probs: &[T], target: &[u16], n: usize, k: usize, spatial: usize, eps: f64) -> Vec<DiceTerm> {
    let mut terms = Vec::with_capacity(k - 1);
    for ch in 1..k {
        let mut num = 0.0f64;
        let mut psum = 0.0f64;
        let mut tsum = 0.0f64;
        for b in 0..n {
            let off = (b * k + ch) * spatial;
            let t_off = b * spatial;
            for s in 0..spatial {
                let p = probs[off + s].to_f64();
                psum += p;
                if target[t_off + s] as usize == ch {
                    num += p;
                    tsum += 1.0;
                }
            }
        }
        let den = psum + tsum;
        terms.push(DiceTerm { term: (2.0 * num + eps) / (den + eps), den });
    }
    terms
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_2w() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let v = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let prod = g.mul(w, v).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(v).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn relu_and_leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), false);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let l = g.leaky_relu(x, 0.1);
        let lv = g.value(l).data().to_vec();
        assert!((lv[0] + 0.1).abs() < 1e-15 && (lv[1] - 2.0).abs() < 1e-15);

        let x10 = g.leaf(Tensor::new(vec![1], vec![-10.0]).unwrap(), false);
        let l10 = g.leaky_relu(x10, 0.1);
        assert!((g.value(l10).data()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[1, 4, 2], 0.7), false);
        let s = g.softmax_channels(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_per_position() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 1.7).sin() * 3.0).collect();
        let x = g.leaf(Tensor::new(vec![2, 3, 4], data).unwrap(), false);
        let s = g.softmax_channels(x).unwrap();
        let sd = g.value(s).data();
        for b in 0..2 {
            for pos in 0..4 {
                let total: f64 = (0..3).map(|c| sd[(b * 3 + c) * 4 + pos]).sum();
                assert!((total - 1.0).abs() < 1e-6);
                for c in 0..3 {
                    let v = sd[(b * 3 + c) * 4 + pos];
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn instance_norm_standardizes_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap(), false);
        let gamma = g.leaf(Tensor::filled(&[1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.instance_norm(x, gamma, beta, 1e-9).unwrap();
        let yd = g.value(y).data();
        assert!((yd[0] + 1.0).abs() < 1e-4);
        assert!((yd[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero_then_shifted() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[1, 2, 3], 4.2), false);
        let gamma = g.leaf(Tensor::filled(&[2], 1.0), false);
        let beta = g.leaf(Tensor::filled(&[2], 5.0), false);
        let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_then_split_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sq = g.mul(c, c).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 4.0]);
        assert_eq!(g.grad(b).unwrap(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn dice_loss_perfect_prediction_is_near_zero() {
        let mut g = Graph::<f64>::new();
        // logits hugely favoring the correct class at every voxel
        let mut logits = Tensor::zeros(&[1, 2, 4]);
        let target = [0u16, 1, 1, 0];
        for (s, &t) in target.iter().enumerate() {
            logits.data_mut()[t as usize * 4 + s] = 50.0;
        }
        let x = g.leaf(logits, false);
        let p = g.softmax_channels(x).unwrap();
        let loss = g.dice_loss(p, &target, 1e-5).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-6);
    }

    #[test]
    fn dice_loss_uniform_probs_closed_form() {
        // Uniform logits give p = 1/K everywhere; with half the voxels
        // foreground of class 1 (K=2): num = S/4, den = S/2 + S/2.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 8]), false);
        let target = [1u16, 1, 1, 1, 0, 0, 0, 0];
        let p = g.softmax_channels(x).unwrap();
        let loss = g.dice_loss(p, &target, 1e-5).unwrap();
        let expected = 1.0 - (2.0 * 2.0 + 1e-5) / (4.0 + 4.0 + 1e-5);
        let got = g.value(loss).data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn dice_loss_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2]), false);
        let p = g.softmax_channels(x).unwrap();
        assert!(matches!(g.dice_loss(p, &[0, 2], 1e-5), Err(Error::Data(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ConvSpec::new(3, 2, 4, vec![3, 3, 3], vec![1, 1, 1], vec![1, 1, 1], false).unwrap();
        let x_data: Vec<f64> = (0..2 * 216).map(|i| (i as f64 * 0.11).sin()).collect();
        let w_data: Vec<f64> = (0..spec.weight_numel()).map(|i| (i as f64 * 0.07).cos()).collect();
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(vec![1, 2, 6, 6, 6], x_data.clone()).unwrap(), false);
            let w = g.leaf(Tensor::new(spec.weight_shape(), w_data.clone()).unwrap(), false);
            let y = g.conv_nd(x, w, None, &spec).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
