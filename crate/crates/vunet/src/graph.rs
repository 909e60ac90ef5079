//! Reverse-mode autodiff on an eagerly evaluated tape.
//!
//! Building an op through [`Graph`] computes its value immediately and
//! records the operation. Node creation order is a topological order by
//! construction (an op can only reference existing nodes), so the backward
//! pass is a single reverse sweep. Every op output is checked for
//! non-finite values; a NaN or infinity anywhere surfaces as an error at
//! the op that produced it.
//!
//! Gradients of intermediate nodes are released as soon as they have been
//! propagated; only parameter gradients survive the sweep.

use std::collections::HashMap;

use crate::conv::{conv2d_backward, conv2d_forward, pixel_shuffle_backward, pixel_shuffle_forward};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    LeakyRelu(Var, S),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    ConcatChannels(Vec<Var>),
    ChannelSlice {
        x: Var,
        start: usize,
        len: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    WeightNorm {
        v: Var,
        gain: Var,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    by_name: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Recorded computation over one forward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_cache: HashMap<String, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients do not flow into leaves.
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(Op::Leaf, value, "leaf")
    }

    /// Named trainable input. Binding the same name twice returns the
    /// original node so each parameter appears once per graph.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let v = self.push(Op::Param(name.to_string()), value.clone(), "param")?;
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), value, "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), value, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.ln());
        self.push(Op::Ln(a), value, "ln")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.abs());
        self.push(Op::Abs(a), value, "abs")
    }

    /// `x` for `x > 0`, else `alpha * x`; the derivative at 0 is `alpha`.
    pub fn leaky_relu(&mut self, a: Var, alpha: S) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > S::ZERO { x } else { alpha * x });
        self.push(Op::LeakyRelu(a, alpha), value, "leaky_relu")
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        let value = self.value(a).map(|x| x.maximum(lo).minimum(hi));
        self.push(Op::Clamp(a, lo, hi), value, "clamp")
    }

    /// Sum of all elements; returns a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, "sum")
    }

    /// Mean of all elements; returns a scalar node.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::ShapeMismatch("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(self.value(a).sum() * (S::ONE / S::from_f64(n as f64)));
        self.push(Op::Mean(a), value, "mean")
    }

    /// Concatenate along the channel axis (axis 0 for rank 3, axis 1 for
    /// rank 4). Batch and spatial extents must match.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        }
        let rank = self.value(inputs[0]).shape().len();
        if rank != 3 && rank != 4 {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels expects rank 3 or 4, got {}",
                rank
            )));
        }
        let (n0, _, h0, w0) = self.value(inputs[0]).dims_nchw()?;
        let mut c_total = 0;
        for &v in inputs {
            let t = self.value(v);
            if t.shape().len() != rank {
                return Err(Error::ShapeMismatch("concat rank mismatch".into()));
            }
            let (n, c, h, w) = t.dims_nchw()?;
            if (n, h, w) != (n0, h0, w0) {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels extents differ: {:?} vs {:?}",
                    self.value(inputs[0]).shape(),
                    t.shape()
                )));
            }
            c_total += c;
        }
        let plane = h0 * w0;
        let mut out = vec![S::ZERO; n0 * c_total * plane];
        for s in 0..n0 {
            let mut off = 0;
            for &v in inputs {
                let t = self.value(v);
                let (_, c, _, _) = t.dims_nchw()?;
                let len = c * plane;
                let src = &t.data()[s * len..(s + 1) * len];
                out[s * c_total * plane + off..s * c_total * plane + off + len]
                    .copy_from_slice(src);
                off += len;
            }
        }
        let shape = if rank == 3 {
            vec![c_total, h0, w0]
        } else {
            vec![n0, c_total, h0, w0]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::ConcatChannels(inputs.to_vec()),
            value,
            "concat_channels",
        )
    }

    /// Take channels `start..start + len` (inverse of `concat_channels`).
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape().len();
        let (n, c, h, w) = t.dims_nchw()?;
        if start + len > c {
            return Err(Error::ShapeMismatch(format!(
                "channel_slice {}..{} out of {} channels",
                start,
                start + len,
                c
            )));
        }
        let plane = h * w;
        let mut out = vec![S::ZERO; n * len * plane];
        for s in 0..n {
            let src = &t.data()[(s * c + start) * plane..(s * c + start + len) * plane];
            out[s * len * plane..(s + 1) * len * plane].copy_from_slice(src);
        }
        let shape = if rank == 3 {
            vec![len, h, w]
        } else {
            vec![n, len, h, w]
        };
        let value = Tensor::new(shape, out)?;
        self.push(Op::ChannelSlice { x, start, len }, value, "channel_slice")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        self.push(Op::Conv2d { x, w, bias, stride }, value, "conv2d")
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = pixel_shuffle_forward(self.value(x), r)?;
        self.push(Op::PixelShuffle { x, r }, value, "pixel_shuffle")
    }

    /// Effective convolution weight `w = gain * v / ||v||`, where the norm
    /// is taken over each output channel's slice of `v`.
    pub fn weight_norm(&mut self, v: Var, gain: Var) -> Result<Var> {
        let vt = self.value(v);
        let gt = self.value(gain);
        let vs = vt.shape();
        if vs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "weight_norm direction must be rank 4, got {:?}",
                vs
            )));
        }
        let c_out = vs[0];
        if gt.shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "weight_norm gain shape {:?} does not match {} output channels",
                gt.shape(),
                c_out
            )));
        }
        let slice = vt.numel() / c_out;
        let mut out = vec![S::ZERO; vt.numel()];
        for o in 0..c_out {
            let src = &vt.data()[o * slice..(o + 1) * slice];
            let mut sq = S::ZERO;
            for &x in src {
                sq += x * x;
            }
            let norm = sq.sqrt();
            if norm.to_f64() < 1e-12 {
                return Err(Error::Numeric(format!(
                    "weight_norm: zero-norm direction slice for output channel {}",
                    o
                )));
            }
            let k = gt.data()[o] / norm;
            for (dst, &x) in out[o * slice..(o + 1) * slice].iter_mut().zip(src) {
                *dst = x * k;
            }
        }
        let value = Tensor::new(vs.to_vec(), out)?;
        self.push(Op::WeightNorm { v, gain }, value, "weight_norm")
    }

    /// Reverse sweep from a scalar loss. Returns the gradient for every
    /// parameter bound into this graph; intermediate gradients are freed as
    /// soon as they have been consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);
        let mut out: HashMap<String, Tensor<S>> = HashMap::new();

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let accum =
                |grads: &mut Vec<Option<Vec<S>>>, dst: Var, contribution: Vec<S>| match &mut grads
                    [dst.0]
                {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                    match out.remove(name.as_str()) {
                        Some(prev) => {
                            out.insert(name.clone(), prev.zip_map(&t, |a, b| a + b)?);
                        }
                        None => {
                            out.insert(name.clone(), t);
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accum(&mut grads, b, g.clone());
                    accum(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accum(&mut grads, b, g.iter().map(|&x| -x).collect());
                    accum(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    let db: Vec<S> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    accum(&mut grads, a, da);
                    accum(&mut grads, b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accum(&mut grads, a, g.iter().map(|&x| x * c).collect());
                }
                Op::AddScalar(a, _) => {
                    let a = *a;
                    accum(&mut grads, a, g);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(&gi, &yi)| gi * yi)
                        .collect();
                    accum(&mut grads, a, d);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gi, &xi)| gi / xi)
                        .collect();
                    accum(&mut grads, a, d);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gi, &xi)| {
                            if xi > S::ZERO {
                                gi
                            } else if xi < S::ZERO {
                                -gi
                            } else {
                                S::ZERO
                            }
                        })
                        .collect();
                    accum(&mut grads, a, d);
                }
                Op::LeakyRelu(a, alpha) => {
                    let (a, alpha) = (*a, *alpha);
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gi, &xi)| if xi > S::ZERO { gi } else { gi * alpha })
                        .collect();
                    accum(&mut grads, a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let d: Vec<S> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { S::ZERO })
                        .collect();
                    accum(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.numel();
                    accum(&mut grads, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.numel();
                    let gi = g[0] * (S::ONE / S::from_f64(n as f64));
                    accum(&mut grads, a, vec![gi; n]);
                }
                Op::ConcatChannels(inputs) => {
                    let inputs = inputs.clone();
                    let (n0, c_total, h, w) = self.nodes[i].value.dims_nchw()?;
                    let plane = h * w;
                    let mut off = 0;
                    for v in inputs {
                        let (_, c, _, _) = self.nodes[v.0].value.dims_nchw()?;
                        let len = c * plane;
                        let mut d = vec![S::ZERO; n0 * len];
                        for s in 0..n0 {
                            d[s * len..(s + 1) * len].copy_from_slice(
                                &g[s * c_total * plane + off..s * c_total * plane + off + len],
                            );
                        }
                        off += len;
                        accum(&mut grads, v, d);
                    }
                }
                Op::ChannelSlice { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let (n, c, h, w) = self.nodes[x.0].value.dims_nchw()?;
                    let plane = h * w;
                    let mut d = vec![S::ZERO; n * c * plane];
                    for s in 0..n {
                        d[(s * c + start) * plane..(s * c + start + len) * plane]
                            .copy_from_slice(&g[s * len * plane..(s + 1) * len * plane]);
                    }
                    accum(&mut grads, x, d);
                }
                Op::Conv2d { x, w, bias, stride } => {
                    let (x, w, bias, stride) = (*x, *w, *bias, *stride);
                    let dy = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                    let (dx, dw, db) = conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        stride,
                        &dy,
                    )?;
                    accum(&mut grads, x, dx.data().to_vec());
                    accum(&mut grads, w, dw.data().to_vec());
                    if let Some(b) = bias {
                        accum(&mut grads, b, db.data().to_vec());
                    }
                }
                Op::PixelShuffle { x, r } => {
                    let (x, r) = (*x, *r);
                    let dy = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                    let dx = pixel_shuffle_backward(&dy, r, self.nodes[x.0].value.shape())?;
                    accum(&mut grads, x, dx.data().to_vec());
                }
                Op::WeightNorm { v, gain } => {
                    let (v, gain) = (*v, *gain);
                    let vt = &self.nodes[v.0].value;
                    let gt = &self.nodes[gain.0].value;
                    let c_out = vt.shape()[0];
                    let slice = vt.numel() / c_out;
                    let mut dv = vec![S::ZERO; vt.numel()];
                    let mut dg = vec![S::ZERO; c_out];
                    for o in 0..c_out {
                        let vsl = &vt.data()[o * slice..(o + 1) * slice];
                        let gsl = &g[o * slice..(o + 1) * slice];
                        let mut sq = S::ZERO;
                        for &x in vsl {
                            sq += x * x;
                        }
                        let norm = sq.sqrt();
                        let mut dot = S::ZERO; // sum_j dw_j * vhat_j
                        for (&gj, &vj) in gsl.iter().zip(vsl) {
                            dot += gj * (vj / norm);
                        }
                        dg[o] = dot;
                        let k = gt.data()[o] / norm;
                        for (idx, (&gj, &vj)) in gsl.iter().zip(vsl).enumerate() {
                            dv[o * slice + idx] = k * (gj - (vj / norm) * dot);
                        }
                    }
                    accum(&mut grads, v, dv);
                    accum(&mut grads, gain, dg);
                }
            }
        }
        Ok(Gradients { by_name: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn concat_shape_law() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[3, 4, 4])).unwrap();
        let b = g.leaf(Tensor::zeros(&[5, 4, 4])).unwrap();
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[8, 4, 4]);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::scalar(-2.0)).unwrap();
        let y = g.leaky_relu(a, 0.2).unwrap();
        assert!((g.value(y).scalar_value().unwrap() + 0.4).abs() < 1e-7);
    }

    #[test]
    fn sum_abs_diff_matches_scalar_loop() {
        let mut rng = Rng::derive(2, "l1");
        let a = Tensor::<f32>::randn(&[2, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[2, 2], 1.0, &mut rng);
        let mut expect = 0.0f32;
        for (x, y) in a.data().iter().zip(b.data()) {
            expect += (x - y).abs();
        }
        let mut g = Graph::<f32>::new();
        let (va, vb) = (g.leaf(a).unwrap(), g.leaf(b).unwrap());
        let d = g.sub(va, vb).unwrap();
        let d = g.abs(d).unwrap();
        let s = g.sum(d).unwrap();
        assert!((g.value(s).scalar_value().unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(p^2) has gradient 2p.
        let mut rng = Rng::derive(3, "quad");
        let p = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let vp = g.param("p", &p).unwrap();
        let sq = g.mul(vp, vp).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let gp = grads.get("p").unwrap();
        for (gi, pi) in gp.data().iter().zip(p.data()) {
            assert!((gi - 2.0 * pi).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_region_gradient_is_ones() {
        // loss = sum(leaky_relu(p)) with p > 0 everywhere.
        let p = Tensor::<f64>::full(&[4], 0.5);
        let mut g = Graph::<f64>::new();
        let vp = g.param("p", &p).unwrap();
        let y = g.leaky_relu(vp, 0.2).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads
            .get("p")
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", &Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(g.ln(a), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn param_binding_caches_by_name() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::zeros(&[2]);
        let a = g.param("w", &t).unwrap();
        let b = g.param("w", &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weight_norm_matches_explicit_reconstruction() {
        let mut rng = Rng::derive(9, "wn");
        let v = Tensor::<f64>::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let gain = Tensor::<f64>::randn(&[4], 1.0, &mut rng).map(|x| x.abs() + 0.5);
        let mut g = Graph::<f64>::new();
        let vv = g.leaf(v.clone()).unwrap();
        let vg = g.leaf(gain.clone()).unwrap();
        let w = g.weight_norm(vv, vg).unwrap();
        let slice = 27;
        for o in 0..4 {
            let vs = &v.data()[o * slice..(o + 1) * slice];
            let norm: f64 = vs.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (j, &vj) in vs.iter().enumerate() {
                let expect = gain.data()[o] * vj / norm;
                assert!((g.value(w).data()[o * slice + j] - expect).abs() < 1e-12);
            }
        }
    }
}
