//! Forward operations and their graph records.

use super::{Activation, NormMode, NormState, Scalar, Tensor, TensorError};

/// Record of the operation that produced a tensor. Holds handles to the
/// inputs plus whatever forward values the backward rule needs.
pub(crate) enum Op {
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Linear {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Swish {
        input: Tensor,
    },
    ChannelNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mode: NormMode,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool {
        input: Tensor,
    },
    AvgPool2d {
        input: Tensor,
        size: usize,
        stride: usize,
    },
    ConcatChannels {
        parts: Vec<Tensor>,
    },
    Add {
        lhs: Tensor,
        rhs: Tensor,
    },
    Mul {
        lhs: Tensor,
        rhs: Tensor,
    },
    Softmax {
        input: Tensor,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Tensor,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SumAll {
        input: Tensor,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut p = vec![input.clone(), kernel.clone()];
                if let Some(b) = bias {
                    p.push(b.clone());
                }
                p
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::Relu { input }
            | Op::Swish { input }
            | Op::GlobalAvgPool { input }
            | Op::AvgPool2d { input, .. }
            | Op::Softmax { input, .. }
            | Op::SumAll { input } => vec![input.clone()],
            Op::ChannelNorm {
                input, gamma, beta, ..
            } => vec![input.clone(), gamma.clone(), beta.clone()],
            Op::ConcatChannels { parts } => parts.clone(),
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![lhs.clone(), rhs.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }
}

fn require_4d(t: &Tensor, context: &str) -> Result<[usize; 4], TensorError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidArgument(format!(
            "{context}: expected a 4-d tensor [N,C,H,W], got shape {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn any_requires(primary: &[&Tensor]) -> bool {
    primary.iter().any(|t| t.requires_grad())
}

/// Output spatial extent of a convolution-style window sweep.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Grouped 2-d cross-correlation; `groups == 1` is a dense convolution and
/// `groups == C` is depthwise. Shared by the public conv entry points.
pub(crate) fn conv2d_grouped(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor, TensorError> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument(
            "conv2d: stride must be positive".into(),
        ));
    }
    let [n_batch, c_in, h, w] = require_4d(input, "conv2d input")?;
    let kshape = kernel.shape();
    if kshape.len() != 4 {
        return Err(TensorError::InvalidArgument(format!(
            "conv2d: expected kernel [Cout,Cin/g,kH,kW], got shape {kshape:?}"
        )));
    }
    let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if c_in % groups != 0 || c_out % groups != 0 || kc != c_in / groups {
        return Err(TensorError::shape(
            format!("conv2d kernel channels vs input channels (groups={groups})"),
            &input.shape(),
            &kshape,
        ));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(TensorError::shape(
            format!("conv2d kernel larger than padded input (padding={padding})"),
            &input.shape(),
            &kshape,
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::shape("conv2d bias", &[c_out], &b.shape()));
        }
    }

    let out_h = conv_out_extent(h, kh, stride, padding);
    let out_w = conv_out_extent(w, kw, stride, padding);
    let cout_per_group = c_out / groups;

    let in_d = input.data();
    let k_d = kernel.data();
    let b_d = bias.map(|b| b.data());
    let mut out = vec![0.0; n_batch * c_out * out_h * out_w];

    for n in 0..n_batch {
        for co in 0..c_out {
            let ci0 = (co / cout_per_group) * kc;
            let bias_v = b_d.as_ref().map_or(0.0, |b| b[co]);
            for oy in 0..out_h {
                let iy0 = (oy * stride) as isize - padding as isize;
                let ky_lo = (-iy0).max(0) as usize;
                let ky_hi = (h as isize - iy0).clamp(0, kh as isize) as usize;
                for ox in 0..out_w {
                    let ix0 = (ox * stride) as isize - padding as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = (w as isize - ix0).clamp(0, kw as isize) as usize;
                    let mut acc = bias_v;
                    for kc_i in 0..kc {
                        let ci = ci0 + kc_i;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let in_row = &in_d[((n * c_in + ci) * h + iy) * w..][..w];
                            let k_row = &k_d[((co * kc + kc_i) * kh + ky) * kw..][..kw];
                            for kx in kx_lo..kx_hi {
                                let ix = (ix0 + kx as isize) as usize;
                                acc += in_row[ix] * k_row[kx];
                            }
                        }
                    }
                    out[((n * c_out + co) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }

    let mut primaries = vec![input, kernel];
    if let Some(b) = bias {
        primaries.push(b);
    }
    let op = any_requires(&primaries).then(|| Op::Conv2d {
        input: input.clone(),
        kernel: kernel.clone(),
        bias: bias.cloned(),
        stride,
        padding,
        groups,
    });
    Ok(Tensor::from_op(
        vec![n_batch, c_out, out_h, out_w],
        out,
        op,
    ))
}

impl Tensor {
    /// 2-d cross-correlation with zero padding.
    ///
    /// `self` is `[N,Cin,H,W]`, `kernel` is `[Cout,Cin,kH,kW]`, the optional
    /// bias is `[Cout]`. The output spatial extent is
    /// `floor((H + 2*padding - kH)/stride) + 1` (likewise for width).
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        conv2d_grouped(self, kernel, bias, stride, padding, 1)
    }

    /// Depthwise spatial convolution followed by a 1x1 cross-channel mix.
    ///
    /// `depthwise` is `[C,1,kH,kW]` (one spatial filter per input channel),
    /// `pointwise` is `[Cout,C,1,1]`. Equivalent to running each channel
    /// through its own conv2d and then a 1x1 conv2d over the stack.
    pub fn depthwise_separable_conv(
        &self,
        depthwise: &Tensor,
        pointwise: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let [_, c_in, _, _] = require_4d(self, "depthwise_separable_conv input")?;
        let dshape = depthwise.shape();
        if dshape.len() != 4 || dshape[0] != c_in || dshape[1] != 1 {
            return Err(TensorError::shape(
                "depthwise kernel channels vs input channels",
                &self.shape(),
                &dshape,
            ));
        }
        let spatial = conv2d_grouped(self, depthwise, None, stride, padding, c_in)?;
        spatial.conv2d(pointwise, None, 1, 0)
    }

    /// Elementwise nonlinearity; shape preserving.
    pub fn activation(&self, kind: Activation) -> Tensor {
        let data = self.data();
        let out: Vec<f64> = match kind {
            Activation::Relu => data.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Swish => data.iter().map(|&v| v * sigmoid(v)).collect(),
        };
        let op = self.requires_grad().then(|| match kind {
            Activation::Relu => Op::Relu {
                input: self.clone(),
            },
            Activation::Swish => Op::Swish {
                input: self.clone(),
            },
        });
        Tensor::from_op(self.shape(), out, op)
    }

    pub fn relu(&self) -> Tensor {
        self.activation(Activation::Relu)
    }

    pub fn swish(&self) -> Tensor {
        self.activation(Activation::Swish)
    }

    /// Mean over the spatial extent: `[N,C,H,W]` to `[N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor, TensorError> {
        let [n_batch, c, h, w] = require_4d(self, "global_avg_pool input")?;
        let data = self.data();
        let plane = h * w;
        let mut out = vec![0.0; n_batch * c];
        for (i, slot) in out.iter_mut().enumerate() {
            let start = i * plane;
            *slot = data[start..start + plane].iter().sum::<f64>() / plane as f64;
        }
        let op = self.requires_grad().then(|| Op::GlobalAvgPool {
            input: self.clone(),
        });
        Ok(Tensor::from_op(vec![n_batch, c], out, op))
    }

    /// Non-overlapping window mean over the spatial extent. The windows must
    /// tile the input exactly.
    pub fn avg_pool2d(&self, size: usize, stride: usize) -> Result<Tensor, TensorError> {
        let [n_batch, c, h, w] = require_4d(self, "avg_pool2d input")?;
        if size == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument(
                "avg_pool2d: size and stride must be positive".into(),
            ));
        }
        if size > h || size > w || (h - size) % stride != 0 || (w - size) % stride != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "avg_pool2d: window {size} stride {stride} does not tile spatial extent {h}x{w}"
            )));
        }
        let out_h = (h - size) / stride + 1;
        let out_w = (w - size) / stride + 1;
        let data = self.data();
        let inv_area = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; n_batch * c * out_h * out_w];
        for nc in 0..n_batch * c {
            let in_plane = &data[nc * h * w..][..h * w];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for dy in 0..size {
                        let row = (oy * stride + dy) * w + ox * stride;
                        acc += in_plane[row..row + size].iter().sum::<f64>();
                    }
                    out[(nc * out_h + oy) * out_w + ox] = acc * inv_area;
                }
            }
        }
        let op = self.requires_grad().then(|| Op::AvgPool2d {
            input: self.clone(),
            size,
            stride,
        });
        Ok(Tensor::from_op(vec![n_batch, c, out_h, out_w], out, op))
    }

    /// Affine map `out[n,k] = sum_d weight[k,d] * x[n,d] + bias[k]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let s = self.shape();
        let ws = weight.shape();
        if s.len() != 2 || ws.len() != 2 || ws[1] != s[1] {
            return Err(TensorError::shape(
                "linear input features vs weight columns",
                &s,
                &ws,
            ));
        }
        let (n_batch, d) = (s[0], s[1]);
        let k = ws[0];
        if bias.shape() != [k] {
            return Err(TensorError::shape("linear bias", &[k], &bias.shape()));
        }
        let x = self.data();
        let w_d = weight.data();
        let b_d = bias.data();
        let mut out = vec![0.0; n_batch * k];
        for n in 0..n_batch {
            let row = &x[n * d..(n + 1) * d];
            for ki in 0..k {
                let w_row = &w_d[ki * d..(ki + 1) * d];
                let mut acc = b_d[ki];
                for di in 0..d {
                    acc += w_row[di] * row[di];
                }
                out[n * k + ki] = acc;
            }
        }
        let op = any_requires(&[self, weight, bias]).then(|| Op::Linear {
            input: self.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        });
        Ok(Tensor::from_op(vec![n_batch, k], out, op))
    }

    /// Elementwise sum of two tensors with identical shapes. Shortcut
    /// connections use this; a channel change needs an explicit projection
    /// first.
    pub fn residual_add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::shape(
                "residual_add operands",
                &self.shape(),
                &other.shape(),
            ));
        }
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let op = any_requires(&[self, other]).then(|| Op::Add {
            lhs: self.clone(),
            rhs: other.clone(),
        });
        Ok(Tensor::from_op(self.shape(), out, op))
    }

    /// Elementwise product; used by tests to build weighted reductions.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::shape(
                "mul operands",
                &self.shape(),
                &other.shape(),
            ));
        }
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let op = any_requires(&[self, other]).then(|| Op::Mul {
            lhs: self.clone(),
            rhs: other.clone(),
        });
        Ok(Tensor::from_op(self.shape(), out, op))
    }

    /// Row softmax of a `[N,K]` logit matrix, computed with max subtraction.
    pub fn softmax(&self) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "softmax: expected [N,K] logits with K >= 1, got shape {s:?}"
            )));
        }
        let (n_batch, k) = (s[0], s[1]);
        let data = self.data();
        let mut out = vec![0.0; n_batch * k];
        for n in 0..n_batch {
            let row = &data[n * k..(n + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[n * k + i] = e;
                denom += e;
            }
            for v in &mut out[n * k..(n + 1) * k] {
                *v /= denom;
            }
        }
        let op = self.requires_grad().then(|| Op::Softmax {
            input: self.clone(),
            probs: out.clone(),
        });
        Ok(Tensor::from_op(vec![n_batch, k], out, op))
    }

    /// Sum of all elements as a tracked scalar.
    pub fn sum_all(&self) -> Scalar {
        let total: f64 = self.data().iter().sum();
        let op = self.requires_grad().then(|| Op::SumAll {
            input: self.clone(),
        });
        Scalar::from_tensor(Tensor::from_op(vec![1], vec![total], op))
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Concatenates feature maps along the channel axis, preserving list order.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument(
            "concat_channels: need at least one part".into(),
        ));
    }
    let [n_batch, _, h, w] = require_4d(&parts[0], "concat_channels part 0")?;
    let mut total_c = 0;
    for (i, part) in parts.iter().enumerate() {
        let [pn, pc, ph, pw] = require_4d(part, "concat_channels part")?;
        if pn != n_batch || ph != h || pw != w {
            return Err(TensorError::shape(
                format!("concat_channels part {i} batch/spatial extents"),
                &parts[0].shape(),
                &part.shape(),
            ));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = vec![0.0; n_batch * total_c * plane];
    for n in 0..n_batch {
        let mut c_off = 0;
        for part in parts {
            let pc = part.shape()[1];
            let data = part.data();
            let src = &data[n * pc * plane..(n + 1) * pc * plane];
            let dst_start = (n * total_c + c_off) * plane;
            out[dst_start..dst_start + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let op = any_requires(&refs).then(|| Op::ConcatChannels {
        parts: parts.to_vec(),
    });
    Ok(Tensor::from_op(vec![n_batch, total_c, h, w], out, op))
}

/// Per-channel normalization with learnable scale and shift.
///
/// In [`NormMode::Train`] the batch statistics normalize the input and the
/// running statistics in `state` are updated as
/// `running <- (1 - momentum) * running + momentum * batch`. In
/// [`NormMode::Eval`] the stored running statistics are used and `state` is
/// left untouched. Variance is the population (biased) variance in both the
/// normalizer and the running estimate.
pub fn channel_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    momentum: f64,
    mode: NormMode,
    state: &mut NormState,
) -> Result<Tensor, TensorError> {
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "channel_norm: eps must be positive, got {eps}"
        )));
    }
    let [n_batch, c, h, w] = require_4d(x, "channel_norm input")?;
    if n_batch * h * w == 0 {
        return Err(TensorError::InvalidArgument(
            "channel_norm: empty reduction extent (N*H*W = 0)".into(),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::shape(
            "channel_norm gamma/beta",
            &[c],
            &gamma.shape(),
        ));
    }
    if state.running_mean.len() != c || state.running_var.len() != c {
        return Err(TensorError::shape(
            "channel_norm running statistics",
            &[c],
            &[state.running_mean.len()],
        ));
    }

    let data = x.data();
    let plane = h * w;
    let count = (n_batch * plane) as f64;

    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for n in 0..n_batch {
                    let start = (n * c + ci) * plane;
                    acc += data[start..start + plane].iter().sum::<f64>();
                }
                mean[ci] = acc / count;
            }
            for ci in 0..c {
                let mut acc = 0.0;
                for n in 0..n_batch {
                    let start = (n * c + ci) * plane;
                    for &v in &data[start..start + plane] {
                        let d = v - mean[ci];
                        acc += d * d;
                    }
                }
                var[ci] = acc / count;
            }
            for ci in 0..c {
                state.running_mean[ci] =
                    (1.0 - momentum) * state.running_mean[ci] + momentum * mean[ci];
                state.running_var[ci] =
                    (1.0 - momentum) * state.running_var[ci] + momentum * var[ci];
            }
            (mean, var)
        }
        NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let g_d = gamma.data();
    let b_d = beta.data();
    let mut out = vec![0.0; data.len()];
    for n in 0..n_batch {
        for ci in 0..c {
            let start = (n * c + ci) * plane;
            let scale = g_d[ci] * inv_std[ci];
            let shift = b_d[ci] - mean[ci] * scale;
            for (o, &v) in out[start..start + plane]
                .iter_mut()
                .zip(&data[start..start + plane])
            {
                *o = v * scale + shift;
            }
        }
    }

    let op = any_requires(&[x, gamma, beta]).then(|| Op::ChannelNorm {
        input: x.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        mode,
        mean,
        inv_std,
    });
    Ok(Tensor::from_op(x.shape(), out, op))
}

/// Mean negative log-likelihood of the true classes under row softmax,
/// computed as a fused log-sum-exp of the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Scalar, TensorError> {
    let s = logits.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "cross_entropy: expected [N,K] logits, got shape {s:?}"
        )));
    }
    let (n_batch, k) = (s[0], s[1]);
    if labels.len() != n_batch {
        return Err(TensorError::InvalidArgument(format!(
            "cross_entropy: {} labels for {} rows",
            labels.len(),
            n_batch
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::InvalidArgument(format!(
            "cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let data = logits.data();
    let mut probs = vec![0.0; n_batch * k];
    let mut total = 0.0;
    for n in 0..n_batch {
        let row = &data[n * k..(n + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[n * k + i] = e;
            denom += e;
        }
        for p in &mut probs[n * k..(n + 1) * k] {
            *p /= denom;
        }
        let log_sum_exp = max + denom.ln();
        total += log_sum_exp - row[labels[n]];
    }
    let loss = total / n_batch as f64;
    let op = logits.requires_grad().then(|| Op::CrossEntropy {
        logits: logits.clone(),
        probs,
        labels: labels.to_vec(),
    });
    Ok(Scalar::from_tensor(Tensor::from_op(vec![1], vec![loss], op)))
}
