//! Convolution and subpixel-upsampling kernels.
//!
//! `conv2d` supports 3x3 kernels (zero padding 1) and 1x1 kernels (no
//! padding) at stride 1 or 2, which is the full set of convolutions used by
//! the networks. The forward and backward passes lower to im2col plus GEMM.
//! Work is split across batch samples only: each sample's result is computed
//! by a fixed sequential recipe, so outputs are bitwise independent of the
//! thread count.
//!
//! The naive quintuple-loop reference that these kernels are verified
//! against lives in the test suite, not here.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{conv_out_size, Scalar, Tensor};

fn check_conv_args<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize) -> Result<()> {
    let (_, c_in, _, _) = x.dims_nchw()?;
    let ws = w.shape();
    if ws.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight must be rank 4, got {:?}",
            ws
        )));
    }
    let (kh, kw) = (ws[2], ws[3]);
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::ShapeMismatch(format!(
            "conv2d supports 1x1 and 3x3 kernels, got {}x{}",
            kh, kw
        )));
    }
    if ws[1] != c_in {
        return Err(Error::ChannelMismatch(format!(
            "conv2d input has {} channels but weight expects {}",
            c_in, ws[1]
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d stride must be 1 or 2, got {}",
            stride
        )));
    }
    Ok(())
}

/// Lower one sample `[C, H, W]` into a `[C*k*k, Ho*Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    ksize: usize,
    pad: usize,
    stride: usize,
    cols: &mut [S],
) {
    let ho = conv_out_size(h, ksize, pad, stride);
    let wo = conv_out_size(w, ksize, pad, stride);
    let l = ho * wo;
    debug_assert_eq!(cols.len(), c_in * ksize * ksize * l);
    let mut row = 0;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..ksize {
            for kw in 0..ksize {
                let dst = &mut cols[row * l..(row + 1) * l];
                row += 1;
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out_row.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, out) in out_row.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        *out = if iw < 0 || iw >= w as isize {
                            S::ZERO
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a `[C*k*k, Ho*Wo]` column-gradient back onto `[C, H, W]`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    cols: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    ksize: usize,
    pad: usize,
    stride: usize,
    out: &mut [S],
) {
    let ho = conv_out_size(h, ksize, pad, stride);
    let wo = conv_out_size(w, ksize, pad, stride);
    let l = ho * wo;
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for kh in 0..ksize {
            for kw in 0..ksize {
                let src = &cols[row * l..(row + 1) * l];
                row += 1;
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let src_row = &src[oh * wo..(oh + 1) * wo];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding `k/2` (spatial size preserved at
/// stride 1). Accepts `[C,H,W]` or `[N,C,H,W]` input and returns the same
/// rank.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
) -> Result<Tensor<S>> {
    check_conv_args(x, w, stride)?;
    let (n, c_in, h, wd) = x.dims_nchw()?;
    let ws = w.shape();
    let (c_out, ksize) = (ws[0], ws[2]);
    let pad = ksize / 2;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                b.shape(),
                c_out
            )));
        }
    }
    let ho = conv_out_size(h, ksize, pad, stride);
    let wo = conv_out_size(wd, ksize, pad, stride);
    let l = ho * wo;
    let k = c_in * ksize * ksize;

    let mut out = vec![S::ZERO; n * c_out * l];
    let xs = x.data();
    let wdat = w.data();
    let sample_in = c_in * h * wd;
    par::for_each_chunk_mut(&mut out, c_out * l, |s, out_s| {
        let mut cols = vec![S::ZERO; k * l];
        im2col(
            &xs[s * sample_in..(s + 1) * sample_in],
            c_in,
            h,
            wd,
            ksize,
            pad,
            stride,
            &mut cols,
        );
        // out_s[c_out, l] = w[c_out, k] x cols[k, l]
        unsafe {
            S::gemm(
                c_out,
                k,
                l,
                S::ONE,
                wdat.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                l as isize,
                1,
                S::ZERO,
                out_s.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        if let Some(b) = bias {
            for (o, bo) in b.data().iter().enumerate() {
                for v in out_s[o * l..(o + 1) * l].iter_mut() {
                    *v += *bo;
                }
            }
        }
    });

    let shape = if x.shape().len() == 3 {
        vec![c_out, ho, wo]
    } else {
        vec![n, c_out, ho, wo]
    };
    Tensor::new(shape, out)
}

/// Gradients of `conv2d_forward` w.r.t. input, weight and bias.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    check_conv_args(x, w, stride)?;
    let (n, c_in, h, wd) = x.dims_nchw()?;
    let ws = w.shape();
    let (c_out, ksize) = (ws[0], ws[2]);
    let pad = ksize / 2;
    let ho = conv_out_size(h, ksize, pad, stride);
    let wo = conv_out_size(wd, ksize, pad, stride);
    let l = ho * wo;
    let k = c_in * ksize * ksize;
    let (dn, dc, dh, dw_) = dy.dims_nchw()?;
    if (dn, dc, dh, dw_) != (n, c_out, ho, wo) {
        return Err(Error::ShapeMismatch(format!(
            "conv2d upstream gradient {:?} does not match output ({},{},{},{})",
            dy.shape(),
            n,
            c_out,
            ho,
            wo
        )));
    }

    let xs = x.data();
    let wdat = w.data();
    let dys = dy.data();
    let sample_in = c_in * h * wd;
    let sample_out = c_out * l;

    // d bias: fixed summation order over (sample, position).
    let mut db = vec![S::ZERO; c_out];
    for s in 0..n {
        let dy_s = &dys[s * sample_out..(s + 1) * sample_out];
        for (o, dbo) in db.iter_mut().enumerate() {
            for &v in &dy_s[o * l..(o + 1) * l] {
                *dbo += v;
            }
        }
    }

    // d input: per-sample dcols = w^T x dy, then col2im.
    let mut dx = vec![S::ZERO; n * sample_in];
    par::for_each_chunk_mut(&mut dx, sample_in, |s, dx_s| {
        let dy_s = &dys[s * sample_out..(s + 1) * sample_out];
        let mut dcols = vec![S::ZERO; k * l];
        unsafe {
            // dcols[k, l] = w^T[k, c_out] x dy_s[c_out, l]
            S::gemm(
                k,
                c_out,
                l,
                S::ONE,
                wdat.as_ptr(),
                1,
                k as isize,
                dy_s.as_ptr(),
                l as isize,
                1,
                S::ZERO,
                dcols.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        col2im_add(&dcols, c_in, h, wd, ksize, pad, stride, dx_s);
    });

    // d weight: per-sample products in parallel, reduced in sample order.
    let partials: Vec<Vec<S>> = par::map_indexed(n, |s| {
        let mut cols = vec![S::ZERO; k * l];
        im2col(
            &xs[s * sample_in..(s + 1) * sample_in],
            c_in,
            h,
            wd,
            ksize,
            pad,
            stride,
            &mut cols,
        );
        let dy_s = &dys[s * sample_out..(s + 1) * sample_out];
        let mut g = vec![S::ZERO; c_out * k];
        unsafe {
            // g[c_out, k] = dy_s[c_out, l] x cols^T[l, k]
            S::gemm(
                c_out,
                l,
                k,
                S::ONE,
                dy_s.as_ptr(),
                l as isize,
                1,
                cols.as_ptr(),
                1,
                l as isize,
                S::ZERO,
                g.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        g
    });
    let mut dw = vec![S::ZERO; c_out * k];
    for g in &partials {
        for (acc, &v) in dw.iter_mut().zip(g.iter()) {
            *acc += v;
        }
    }

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![c_out], db)?,
    ))
}

/// Subpixel upsampling: `[r*r*C, H, W] -> [C, r*H, r*W]` with
/// `out[c, r*h + i, r*w + j] = in[c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle_forward<S: Scalar>(x: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    if r == 0 {
        return Err(Error::ShapeMismatch(
            "pixel_shuffle factor must be >= 1".into(),
        ));
    }
    let (n, c_in, h, w) = x.dims_nchw()?;
    if c_in % (r * r) != 0 {
        return Err(Error::ChannelMismatch(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            c_in,
            r * r
        )));
    }
    let c_out = c_in / (r * r);
    let (ho, wo) = (h * r, w * r);
    let xs = x.data();
    let sample_in = c_in * h * w;
    let sample_out = c_out * ho * wo;
    let mut out = vec![S::ZERO; n * sample_out];
    for s in 0..n {
        let src = &xs[s * sample_in..(s + 1) * sample_in];
        let dst = &mut out[s * sample_out..(s + 1) * sample_out];
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let plane = &src[(c * r * r + i * r + j) * h * w..][..h * w];
                    for hh in 0..h {
                        for ww in 0..w {
                            dst[c * ho * wo + (r * hh + i) * wo + (r * ww + j)] =
                                plane[hh * w + ww];
                        }
                    }
                }
            }
        }
    }
    let shape = if x.shape().len() == 3 {
        vec![c_out, ho, wo]
    } else {
        vec![n, c_out, ho, wo]
    };
    Tensor::new(shape, out)
}

/// Inverse index map of [`pixel_shuffle_forward`] (used as its gradient).
pub fn pixel_shuffle_backward<S: Scalar>(
    dy: &Tensor<S>,
    r: usize,
    in_shape: &[usize],
) -> Result<Tensor<S>> {
    let (n, c_out, ho, wo) = dy.dims_nchw()?;
    let (h, w) = (ho / r, wo / r);
    let c_in = c_out * r * r;
    let sample_in = c_in * h * w;
    let sample_out = c_out * ho * wo;
    let dys = dy.data();
    let mut dx = vec![S::ZERO; n * sample_in];
    for s in 0..n {
        let src = &dys[s * sample_out..(s + 1) * sample_out];
        let dst = &mut dx[s * sample_in..(s + 1) * sample_in];
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let plane = &mut dst[(c * r * r + i * r + j) * h * w..][..h * w];
                    for hh in 0..h {
                        for ww in 0..w {
                            plane[hh * w + ww] =
                                src[c * ho * wo + (r * hh + i) * wo + (r * ww + j)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}
