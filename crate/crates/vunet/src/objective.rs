//! Training objective: closed-form KL between the posterior and the
//! conditional prior, plus a reconstruction distance.
//!
//! The reconstruction term is either a plain L1 distance (the Laplace
//! negative log-likelihood up to constants) or a perceptual distance:
//! per-layer L1 between activations of a frozen feature pyramid, each layer
//! weighted by the reciprocal of its element count. The pyramid weights are
//! drawn once from a seeded normal and never trained; a pretrained network
//! could be dropped in behind the same interface.
//!
//! Reductions are: sum over elements, then mean over the batch.

use crate::conv::conv2d_forward;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::GaussianVars;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Reconstruction-term selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconMode {
    Perceptual,
    L1,
}

/// Frozen multi-scale feature extractor. Stage 0 is the raw pixels; each
/// further stage is a 3x3 stride-2 convolution with fixed seeded weights
/// followed by a leaky ReLU.
pub struct PerceptualExtractor<S: Scalar> {
    stages: Vec<Tensor<S>>,
    lambdas: Vec<f64>,
    alpha: f64,
    image_size: usize,
    in_channels: usize,
}

/// Default stage widths of the perceptual pyramid.
pub const PERCEPTUAL_WIDTHS: [usize; 3] = [16, 32, 64];

impl<S: Scalar> PerceptualExtractor<S> {
    pub fn new(
        seed: u64,
        image_size: usize,
        in_channels: usize,
        widths: &[usize],
        alpha: f64,
    ) -> Result<Self> {
        if image_size >> widths.len() == 0 {
            return Err(Error::Config(format!(
                "perceptual pyramid with {} stages needs image_size >= {}",
                widths.len(),
                1 << widths.len()
            )));
        }
        let mut rng = Rng::derive(seed, "perceptual.weights");
        let mut stages = Vec::with_capacity(widths.len());
        let mut lambdas = vec![1.0 / (in_channels * image_size * image_size) as f64];
        let mut prev = in_channels;
        let mut size = image_size;
        for &wch in widths {
            let fan_in = (prev * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            stages.push(Tensor::randn(&[wch, prev, 3, 3], std, &mut rng));
            size /= 2;
            lambdas.push(1.0 / (wch * size * size) as f64);
            prev = wch;
        }
        Ok(PerceptualExtractor {
            stages,
            lambdas,
            alpha,
            image_size,
            in_channels,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Per-layer weights, `lambda[k] = 1 / numel(Phi_k)` at the configured
    /// image size (stage 0 = pixels).
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.in_channels || h != self.image_size || w != self.image_size {
            return Err(Error::ShapeMismatch(format!(
                "perceptual extractor built for {}x{}x{}, got {}x{}x{}",
                self.in_channels, self.image_size, self.image_size, c, h, w
            )));
        }
        Ok(())
    }

    /// Feature maps `[pixels, stage_1, ..., stage_K]` without recording.
    pub fn features_raw(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let (_, c, h, w) = x.dims_nchw()?;
        self.check_input(c, h, w)?;
        let alpha = S::from_f64(self.alpha);
        let mut feats = vec![x.clone()];
        let mut cur = x.clone();
        for wgt in &self.stages {
            let conv = conv2d_forward(&cur, wgt, None, 2)?;
            cur = conv.map(|v| if v > S::ZERO { v } else { alpha * v });
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    /// Same pyramid recorded on a graph; the stage weights enter as
    /// constant leaves so they never receive gradients.
    pub fn features_graph(&self, g: &mut Graph<S>, x: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(x).dims_nchw()?;
        self.check_input(c, h, w)?;
        let alpha = S::from_f64(self.alpha);
        let mut feats = vec![x];
        let mut cur = x;
        for wgt in &self.stages {
            let wv = g.leaf(wgt.clone())?;
            let conv = g.conv2d(cur, wv, None, 2)?;
            cur = g.leaky_relu(conv, alpha)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Deepest stage, spatially averaged: the appearance embedding used by
    /// the consistency metrics. Returns one vector per batch sample.
    pub fn embeddings(&self, x: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
        let feats = self.features_raw(x)?;
        let deepest = feats.last().expect("at least the pixel stage");
        let (n, c, h, w) = deepest.dims_nchw()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let mut e = Vec::with_capacity(c);
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let sum: f64 = deepest.data()[base..base + plane]
                    .iter()
                    .map(|v| v.to_f64())
                    .sum();
                e.push(sum / plane as f64);
            }
            out.push(e);
        }
        Ok(out)
    }
}

/// Sum over elements of the KL divergence between diagonal Gaussians
/// `q` and `p`, written so that `q == p` yields exactly zero:
/// `0.5 * (exp(d) + (mu_q - mu_p)^2 * exp(-logvar_p) - d - 1)` summed,
/// with `d = logvar_q - logvar_p`.
pub fn kl_sum_graph<S: Scalar>(
    g: &mut Graph<S>,
    q: &GaussianVars,
    p: &GaussianVars,
) -> Result<Var> {
    if g.value(q.mean).shape() != g.value(p.mean).shape() {
        return Err(Error::ShapeMismatch(format!(
            "KL between {:?} and {:?}",
            g.value(q.mean).shape(),
            g.value(p.mean).shape()
        )));
    }
    let d = g.sub(q.logvar, p.logvar)?;
    let e = g.exp(d)?;
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.mul(dm, dm)?;
    let neg_lvp = g.scale(p.logvar, S::from_f64(-1.0))?;
    let inv_var_p = g.exp(neg_lvp)?;
    let ratio = g.mul(dm2, inv_var_p)?;
    let s = g.add(e, ratio)?;
    let s = g.sub(s, d)?;
    let s = g.add_scalar(s, S::from_f64(-1.0))?;
    let half = g.scale(s, S::from_f64(0.5))?;
    g.sum(half)
}

/// Closed-form KL on materialized tensors (sum over elements), `f64`.
pub fn kl_sum_raw<S: Scalar>(
    q_mean: &Tensor<S>,
    q_logvar: &Tensor<S>,
    p_mean: &Tensor<S>,
    p_logvar: &Tensor<S>,
) -> Result<f64> {
    if q_mean.shape() != p_mean.shape() || q_logvar.shape() != p_logvar.shape() {
        return Err(Error::ShapeMismatch("KL parameter shapes differ".into()));
    }
    let mut total = 0.0f64;
    for i in 0..q_mean.numel() {
        let (mq, lq) = (q_mean.data()[i].to_f64(), q_logvar.data()[i].to_f64());
        let (mp, lp) = (p_mean.data()[i].to_f64(), p_logvar.data()[i].to_f64());
        if !(mq.is_finite() && lq.is_finite() && mp.is_finite() && lp.is_finite()) {
            return Err(Error::NonFinite {
                op: "kl_diag_gaussians",
            });
        }
        let d = lq - lp;
        total += 0.5 * (d.exp() + (mq - mp) * (mq - mp) * (-lp).exp() - d - 1.0);
    }
    Ok(total)
}

/// `sum |a - b|` as a graph node.
pub fn l1_sum_graph<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    g.sum(ad)
}

/// Perceptual distance between two materialized images (no gradients, no
/// detachment, hence symmetric in its arguments):
/// `sum_k lambda_k * |Phi_k(a) - Phi_k(b)|_1`.
pub fn perceptual_distance_raw<S: Scalar>(
    phi: &PerceptualExtractor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(f64, Vec<f64>)> {
    let fa = phi.features_raw(a)?;
    let fb = phi.features_raw(b)?;
    let mut per_layer = Vec::with_capacity(fa.len());
    let mut total = 0.0;
    for (k, (xa, xb)) in fa.iter().zip(&fb).enumerate() {
        let l1: f64 = xa
            .data()
            .iter()
            .zip(xb.data())
            .map(|(u, v)| (u.to_f64() - v.to_f64()).abs())
            .sum();
        per_layer.push(l1);
        total += phi.lambdas[k] * l1;
    }
    Ok((total, per_layer))
}

/// Loss terms as graph nodes.
pub struct LossVars {
    pub total: Var,
    pub kl: Var,
    pub recon: Var,
    pub per_layer: Vec<Var>,
}

/// Materialized loss values for logging.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub kl: f64,
    pub reconstruction: f64,
    pub per_layer: Vec<f64>,
}

impl LossVars {
    pub fn report<S: Scalar>(&self, g: &Graph<S>) -> Result<LossReport> {
        Ok(LossReport {
            total: g.value(self.total).scalar_value()?.to_f64(),
            kl: g.value(self.kl).scalar_value()?.to_f64(),
            reconstruction: g.value(self.recon).scalar_value()?.to_f64(),
            per_layer: self
                .per_layer
                .iter()
                .map(|&v| g.value(v).scalar_value().map(|s| s.to_f64()))
                .collect::<Result<_>>()?,
        })
    }
}

/// Assemble the negative conditional ELBO (minimized):
/// `total = kl_weight * KL(q || p) + reconstruction`.
///
/// The target `x` enters as a constant leaf, so reconstruction gradients
/// flow only through `xbar`. Without a posterior (no-appearance ablation)
/// the KL term is a constant zero. In perceptual mode `per_layer[k]` is the
/// un-weighted L1 of stage `k` (batch-averaged); in L1 mode there is a
/// single per-layer entry with an implied weight of one.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    phi: &PerceptualExtractor<S>,
    q: Option<&GaussianVars>,
    p: &GaussianVars,
    x: &Tensor<S>,
    xbar: Var,
    mode: ReconMode,
    kl_weight: f64,
) -> Result<LossVars> {
    if x.shape() != g.value(xbar).shape() {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} vs generated {:?}",
            x.shape(),
            g.value(xbar).shape()
        )));
    }
    let (batch, _, _, _) = x.dims_nchw()?;
    let inv_batch = S::from_f64(1.0 / batch as f64);

    let kl = match q {
        Some(q) => {
            let s = kl_sum_graph(g, q, p)?;
            g.scale(s, inv_batch)?
        }
        None => g.leaf(Tensor::scalar(S::ZERO))?,
    };

    let (recon, per_layer) = match mode {
        ReconMode::L1 => {
            let xleaf = g.leaf(x.clone())?;
            let s = l1_sum_graph(g, xbar, xleaf)?;
            let r = g.scale(s, inv_batch)?;
            (r, vec![r])
        }
        ReconMode::Perceptual => {
            let targets = phi.features_raw(x)?;
            let feats = phi.features_graph(g, xbar)?;
            let mut per_layer = Vec::with_capacity(feats.len());
            let mut acc: Option<Var> = None;
            for (k, (f, t)) in feats.iter().zip(&targets).enumerate() {
                let tleaf = g.leaf(t.clone())?;
                let l1 = l1_sum_graph(g, *f, tleaf)?;
                let l1 = g.scale(l1, inv_batch)?;
                per_layer.push(l1);
                let weighted = g.scale(l1, S::from_f64(phi.lambdas[k]))?;
                acc = Some(match acc {
                    Some(a) => g.add(a, weighted)?,
                    None => weighted,
                });
            }
            (
                acc.expect("pyramid has at least the pixel stage"),
                per_layer,
            )
        }
    };

    let wkl = g.scale(kl, S::from_f64(kl_weight))?;
    let total = g.add(wkl, recon)?;
    Ok(LossVars {
        total,
        kl,
        recon,
        per_layer,
    })
}
