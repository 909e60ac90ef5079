//! Shared oracles for integration tests. Everything here is written as the
//! dumbest possible reference: direct summation loops and Monte-Carlo
//! estimates, independent of the implementation paths they check.
//!
//! Each test binary compiles this module separately and uses a subset.
#![allow(dead_code)]

use vunet::rng::Rng;
use vunet::tensor::{conv_out_size, Scalar, Tensor};

/// Quintuple-loop convolution reference: zero padding `k/2`, no tricks.
pub fn naive_conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
) -> Tensor<S> {
    let (n, c_in, h, wd) = x.dims_nchw().unwrap();
    let ws = w.shape();
    let (c_out, ksize) = (ws[0], ws[2]);
    let pad = ksize / 2;
    let ho = conv_out_size(h, ksize, pad, stride);
    let wo = conv_out_size(wd, ksize, pad, stride);
    let mut out = vec![S::ZERO; n * c_out * ho * wo];
    for s in 0..n {
        for o in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = S::ZERO;
                    for c in 0..c_in {
                        for kh in 0..ksize {
                            for kw in 0..ksize {
                                let ih = (oh * stride + kh) as isize - pad as isize;
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((s * c_in + c) * h + ih as usize) * wd + iw as usize];
                                let wv = w.data()[((o * c_in + c) * ksize + kh) * ksize + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[o];
                    }
                    out[((s * c_out + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    let shape = if x.shape().len() == 3 {
        vec![c_out, ho, wo]
    } else {
        vec![n, c_out, ho, wo]
    };
    Tensor::new(shape, out).unwrap()
}

/// Per-window double-loop SSIM reference (valid padding, per channel, then
/// averaged), straight from the definition.
pub fn naive_ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (_, c, h, w) = x.dims_nchw().unwrap();
    let mut kernel = [[0.0f64; WIN]; WIN];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - (WIN / 2) as f64;
            let dx = j as f64 - (WIN / 2) as f64;
            *v = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            ksum += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= ksum;
        }
    }
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let ys = &y.data()[ch * plane..(ch + 1) * plane];
        let mut acc = 0.0;
        let mut count = 0usize;
        for wy in 0..=(h - WIN) {
            for wx in 0..=(w - WIN) {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = kernel[i][j];
                        mx += k * xs[(wy + i) * w + wx + j] as f64;
                        my += k * ys[(wy + i) * w + wx + j] as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = kernel[i][j];
                        let dx = xs[(wy + i) * w + wx + j] as f64;
                        let dy = ys[(wy + i) * w + wx + j] as f64;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cov += k * dx * dy;
                    }
                }
                vx -= mx * mx;
                vy -= my * my;
                cov -= mx * my;
                acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / c as f64
}

/// Monte-Carlo KL estimate `E_q[log q - log p]` for diagonal Gaussians.
pub fn mc_kl(
    q_mean: &[f64],
    q_logvar: &[f64],
    p_mean: &[f64],
    p_logvar: &[f64],
    draws: usize,
    rng: &mut Rng,
) -> f64 {
    let dim = q_mean.len();
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut log_q = 0.0;
        let mut log_p = 0.0;
        for d in 0..dim {
            let std_q = (q_logvar[d] / 2.0).exp();
            let z = q_mean[d] + std_q * rng.normal();
            let dq = z - q_mean[d];
            log_q += -0.5 * (q_logvar[d] + dq * dq / q_logvar[d].exp());
            let dp = z - p_mean[d];
            log_p += -0.5 * (p_logvar[d] + dp * dp / p_logvar[d].exp());
        }
        acc += log_q - log_p;
    }
    acc / draws as f64
}
