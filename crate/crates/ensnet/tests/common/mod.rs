//! Shared test oracles: central finite differences and a naive convolution
//! reference. Both are deliberately independent of the library's kernels.

use ensnet::rng::SplitMix64;
use ensnet::tensor::{Scalar, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;

pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.next_range(lo, hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_param(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.next_range(lo, hi)).collect();
    Tensor::param(shape, data).unwrap()
}

/// Fixed pseudo-random weights turning a tensor-valued op into a scalar
/// loss; breaks the symmetry a plain sum would leave.
pub fn weighted_loss(output: &Tensor, rng: &mut SplitMix64) -> Scalar {
    let weights = random_tensor(rng, &output.shape(), -1.0, 1.0);
    output.mul(&weights).unwrap().sum_all()
}

/// Checks reverse-mode gradients of `loss_fn` against central finite
/// differences for every element of every tensor in `inputs`. `loss_fn`
/// must recompute the loss from the tensors' current contents.
pub fn check_gradients(context: &str, inputs: &[&Tensor], loss_fn: &dyn Fn() -> Scalar) {
    for t in inputs {
        t.zero_grad();
    }
    let loss = loss_fn();
    loss.backward().expect("backward");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| panic!("{context}: missing grad")))
        .collect();

    for (ti, tensor) in inputs.iter().enumerate() {
        let base = tensor.data();
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + FD_STEP;
            tensor.set_data(bumped);
            let loss_plus = loss_fn().value();

            let mut bumped = base.clone();
            bumped[i] = base[i] - FD_STEP;
            tensor.set_data(bumped);
            let loss_minus = loss_fn().value();
            tensor.set_data(base.clone());

            let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            let exact = analytic[ti][i];
            let diff = (numeric - exact).abs();
            let scale = numeric.abs().max(exact.abs());
            assert!(
                diff < FD_ABS_TOL || diff / scale < FD_REL_TOL,
                "{context}: tensor {ti} element {i}: analytic {exact} vs numeric {numeric} \
                 (diff {diff})"
            );
        }
    }
}

/// Quadruple-loop convolution reference over an explicitly zero-padded
/// buffer. Returns row-major `[n, c_out, out_h, out_w]` data.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    input: &[f64],
    (n_batch, c_in, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (c_out, kc, kh, kw): (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    assert_eq!(kc, c_in);
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    let mut padded = vec![0.0; n_batch * c_in * ph * pw];
    for n in 0..n_batch {
        for c in 0..c_in {
            for y in 0..h {
                for x in 0..w {
                    padded[((n * c_in + c) * ph + y + padding) * pw + x + padding] =
                        input[((n * c_in + c) * h + y) * w + x];
                }
            }
        }
    }
    let out_h = (ph - kh) / stride + 1;
    let out_w = (pw - kw) / stride + 1;
    let mut out = vec![0.0; n_batch * c_out * out_h * out_w];
    for n in 0..n_batch {
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                acc += padded[((n * c_in + ci) * ph + iy) * pw + ix]
                                    * kernel[((co * c_in + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * c_out + co) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    (out, (n_batch, c_out, out_h, out_w))
}
