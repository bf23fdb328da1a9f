//! Reverse-mode accumulation over the recorded operation graph.
//!
//! Gradient flow is staged in per-node buffers keyed by node identity and
//! only written into `Tensor::grad` once a node's flow is complete. Leaves
//! and intermediates therefore accumulate additively across repeated
//! backward calls, which is what makes two passes without `zero_grad` yield
//! exactly twice the single-pass gradient.

use std::collections::{HashMap, HashSet};

use super::ops::{conv_out_extent, Op};
use super::{NormMode, Tensor, TensorError};

pub(crate) fn run_backward(root: &Tensor) -> Result<(), TensorError> {
    if !root.has_op() {
        return Err(TensorError::InvalidState(
            "backward on a tensor not produced by tracked operations".into(),
        ));
    }

    // Reverse topological order: every node before the nodes it consumed.
    let order = topo_order(root);

    let mut flows: HashMap<usize, Vec<f64>> = HashMap::new();
    flows.insert(root.key(), vec![1.0; root.num_elements()]);

    for node in &order {
        let Some(flow) = flows.remove(&node.key()) else {
            continue;
        };
        node.with_op(|op| {
            if let Some(op) = op {
                propagate(op, &flow, &mut flows);
            }
        });
        if node.requires_grad() {
            node.accumulate_grad(&flow);
        }
    }
    Ok(())
}

/// Depth-first postorder over gradient-carrying parents, reversed so the
/// root comes first.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.key()) {
            continue;
        }
        stack.push((node.clone(), true));
        node.with_op(|op| {
            if let Some(op) = op {
                for parent in op.parents() {
                    if parent.requires_grad() && !visited.contains(&parent.key()) {
                        stack.push((parent, false));
                    }
                }
            }
        });
    }
    order.reverse();
    order
}

fn add_flow(flows: &mut HashMap<usize, Vec<f64>>, target: &Tensor, contribution: &[f64]) {
    let buf = flows
        .entry(target.key())
        .or_insert_with(|| vec![0.0; target.num_elements()]);
    for (b, c) in buf.iter_mut().zip(contribution) {
        *b += c;
    }
}

fn wants(t: &Tensor) -> bool {
    t.requires_grad()
}

fn propagate(op: &Op, flow: &[f64], flows: &mut HashMap<usize, Vec<f64>>) {
    match op {
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
            groups,
        } => conv2d_backward(input, kernel, bias.as_ref(), *stride, *padding, *groups, flow, flows),
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let s = input.shape();
            let (n_batch, d) = (s[0], s[1]);
            let k = weight.shape()[0];
            if wants(input) {
                let w_d = weight.data();
                let mut dx = vec![0.0; n_batch * d];
                for n in 0..n_batch {
                    for ki in 0..k {
                        let g = flow[n * k + ki];
                        if g == 0.0 {
                            continue;
                        }
                        let w_row = &w_d[ki * d..(ki + 1) * d];
                        for di in 0..d {
                            dx[n * d + di] += g * w_row[di];
                        }
                    }
                }
                add_flow(flows, input, &dx);
            }
            if wants(weight) {
                let x = input.data();
                let mut dw = vec![0.0; k * d];
                for n in 0..n_batch {
                    let row = &x[n * d..(n + 1) * d];
                    for ki in 0..k {
                        let g = flow[n * k + ki];
                        if g == 0.0 {
                            continue;
                        }
                        let dw_row = &mut dw[ki * d..(ki + 1) * d];
                        for di in 0..d {
                            dw_row[di] += g * row[di];
                        }
                    }
                }
                add_flow(flows, weight, &dw);
            }
            if wants(bias) {
                let mut db = vec![0.0; k];
                for n in 0..n_batch {
                    for ki in 0..k {
                        db[ki] += flow[n * k + ki];
                    }
                }
                add_flow(flows, bias, &db);
            }
        }
        Op::Relu { input } => {
            if wants(input) {
                let x = input.data();
                let dx: Vec<f64> = x
                    .iter()
                    .zip(flow)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                add_flow(flows, input, &dx);
            }
        }
        Op::Swish { input } => {
            if wants(input) {
                let x = input.data();
                let dx: Vec<f64> = x
                    .iter()
                    .zip(flow)
                    .map(|(&v, &g)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                add_flow(flows, input, &dx);
            }
        }
        Op::ChannelNorm {
            input,
            gamma,
            beta,
            mode,
            mean,
            inv_std,
        } => channel_norm_backward(input, gamma, beta, *mode, mean, inv_std, flow, flows),
        Op::GlobalAvgPool { input } => {
            if wants(input) {
                let s = input.shape();
                let plane = s[2] * s[3];
                let scale = 1.0 / plane as f64;
                let mut dx = vec![0.0; input.num_elements()];
                for (nc, &g) in flow.iter().enumerate() {
                    let v = g * scale;
                    for slot in &mut dx[nc * plane..(nc + 1) * plane] {
                        *slot += v;
                    }
                }
                add_flow(flows, input, &dx);
            }
        }
        &Op::AvgPool2d {
            ref input,
            size,
            stride,
        } => {
            if wants(input) {
                let s = input.shape();
                let (h, w) = (s[2], s[3]);
                let out_h = (h - size) / stride + 1;
                let out_w = (w - size) / stride + 1;
                let inv_area = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; input.num_elements()];
                for nc in 0..s[0] * s[1] {
                    let plane = &mut dx[nc * h * w..(nc + 1) * h * w];
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let g = flow[(nc * out_h + oy) * out_w + ox] * inv_area;
                            for dy in 0..size {
                                let row = (oy * stride + dy) * w + ox * stride;
                                for slot in &mut plane[row..row + size] {
                                    *slot += g;
                                }
                            }
                        }
                    }
                }
                add_flow(flows, input, &dx);
            }
        }
        Op::ConcatChannels { parts } => {
            let n_batch = parts[0].shape()[0];
            let plane = parts[0].shape()[2] * parts[0].shape()[3];
            let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
            for (i, part) in parts.iter().enumerate() {
                if !wants(part) {
                    continue;
                }
                let c_off: usize = parts[..i].iter().map(|p| p.shape()[1]).sum();
                let pc = part.shape()[1];
                let mut dp = vec![0.0; part.num_elements()];
                for n in 0..n_batch {
                    let src = (n * total_c + c_off) * plane;
                    let dst = n * pc * plane;
                    dp[dst..dst + pc * plane].copy_from_slice(&flow[src..src + pc * plane]);
                }
                add_flow(flows, part, &dp);
            }
        }
        Op::Add { lhs, rhs } => {
            if wants(lhs) {
                add_flow(flows, lhs, flow);
            }
            if wants(rhs) {
                add_flow(flows, rhs, flow);
            }
        }
        Op::Mul { lhs, rhs } => {
            if wants(lhs) {
                let r = rhs.data();
                let dx: Vec<f64> = flow.iter().zip(&r).map(|(&g, v)| g * v).collect();
                add_flow(flows, lhs, &dx);
            }
            if wants(rhs) {
                let l = lhs.data();
                let dx: Vec<f64> = flow.iter().zip(&l).map(|(&g, v)| g * v).collect();
                add_flow(flows, rhs, &dx);
            }
        }
        Op::Softmax { input, probs } => {
            if wants(input) {
                let s = input.shape();
                let (n_batch, k) = (s[0], s[1]);
                let mut dx = vec![0.0; n_batch * k];
                for n in 0..n_batch {
                    let y = &probs[n * k..(n + 1) * k];
                    let g = &flow[n * k..(n + 1) * k];
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for i in 0..k {
                        dx[n * k + i] = y[i] * (g[i] - dot);
                    }
                }
                add_flow(flows, input, &dx);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
        } => {
            if wants(logits) {
                let s = logits.shape();
                let (n_batch, k) = (s[0], s[1]);
                let g = flow[0] / n_batch as f64;
                let mut dx = vec![0.0; n_batch * k];
                for n in 0..n_batch {
                    for i in 0..k {
                        let indicator = if i == labels[n] { 1.0 } else { 0.0 };
                        dx[n * k + i] = g * (probs[n * k + i] - indicator);
                    }
                }
                add_flow(flows, logits, &dx);
            }
        }
        Op::SumAll { input } => {
            if wants(input) {
                let dx = vec![flow[0]; input.num_elements()];
                add_flow(flows, input, &dx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
    flow: &[f64],
    flows: &mut HashMap<usize, Vec<f64>>,
) {
    let ishape = input.shape();
    let kshape = kernel.shape();
    let (n_batch, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (c_out, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    let out_h = conv_out_extent(h, kh, stride, padding);
    let out_w = conv_out_extent(w, kw, stride, padding);
    let cout_per_group = c_out / groups;

    let need_input = wants(input);
    let need_kernel = wants(kernel);
    let need_bias = bias.is_some_and(wants);

    let in_d = if need_kernel { input.data() } else { Vec::new() };
    let k_d = if need_input { kernel.data() } else { Vec::new() };
    let mut d_in = need_input.then(|| vec![0.0; input.num_elements()]);
    let mut d_k = need_kernel.then(|| vec![0.0; kernel.num_elements()]);
    let mut d_b = need_bias.then(|| vec![0.0; c_out]);

    for n in 0..n_batch {
        for co in 0..c_out {
            let ci0 = (co / cout_per_group) * kc;
            for oy in 0..out_h {
                let iy0 = (oy * stride) as isize - padding as isize;
                let ky_lo = (-iy0).max(0) as usize;
                let ky_hi = (h as isize - iy0).clamp(0, kh as isize) as usize;
                for ox in 0..out_w {
                    let g = flow[((n * c_out + co) * out_h + oy) * out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(db) = &mut d_b {
                        db[co] += g;
                    }
                    let ix0 = (ox * stride) as isize - padding as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = (w as isize - ix0).clamp(0, kw as isize) as usize;
                    for kc_i in 0..kc {
                        let ci = ci0 + kc_i;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let in_base = ((n * c_in + ci) * h + iy) * w;
                            let k_base = ((co * kc + kc_i) * kh + ky) * kw;
                            for kx in kx_lo..kx_hi {
                                let ix = (ix0 + kx as isize) as usize;
                                if let Some(di) = &mut d_in {
                                    di[in_base + ix] += g * k_d[k_base + kx];
                                }
                                if let Some(dk) = &mut d_k {
                                    dk[k_base + kx] += g * in_d[in_base + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(di) = d_in {
        add_flow(flows, input, &di);
    }
    if let Some(dk) = d_k {
        add_flow(flows, kernel, &dk);
    }
    if let (Some(db), Some(b)) = (d_b, bias) {
        add_flow(flows, b, &db);
    }
}

#[allow(clippy::too_many_arguments)]
fn channel_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: NormMode,
    mean: &[f64],
    inv_std: &[f64],
    flow: &[f64],
    flows: &mut HashMap<usize, Vec<f64>>,
) {
    let s = input.shape();
    let (n_batch, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let count = (n_batch * plane) as f64;
    let x = input.data();
    let g_d = gamma.data();

    // Per-channel reductions of the incoming flow and of flow * normalized.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for n in 0..n_batch {
        for ci in 0..c {
            let start = (n * c + ci) * plane;
            for i in 0..plane {
                let g = flow[start + i];
                sum_g[ci] += g;
                sum_gx[ci] += g * (x[start + i] - mean[ci]) * inv_std[ci];
            }
        }
    }

    if wants(input) {
        let mut dx = vec![0.0; x.len()];
        for n in 0..n_batch {
            for ci in 0..c {
                let start = (n * c + ci) * plane;
                let scale = g_d[ci] * inv_std[ci];
                match mode {
                    NormMode::Train => {
                        for i in 0..plane {
                            let xhat = (x[start + i] - mean[ci]) * inv_std[ci];
                            dx[start + i] = scale
                                * (flow[start + i] - sum_g[ci] / count - xhat * sum_gx[ci] / count);
                        }
                    }
                    NormMode::Eval => {
                        for i in 0..plane {
                            dx[start + i] = scale * flow[start + i];
                        }
                    }
                }
            }
        }
        add_flow(flows, input, &dx);
    }
    if wants(gamma) {
        add_flow(flows, gamma, &sum_gx);
    }
    if wants(beta) {
        add_flow(flows, beta, &sum_g);
    }
}
