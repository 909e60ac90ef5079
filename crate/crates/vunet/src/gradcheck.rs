//! Finite-difference verification of recorded gradients.
//!
//! A probe describes a set of named parameter tensors plus a builder that
//! turns them into a scalar loss. The harness compares the recorded
//! backward pass against central differences in `f64`. Builders must be
//! deterministic: they are re-invoked for every probe evaluation and any
//! auxiliary randomness has to come from the `Rng` handed to them, which is
//! re-derived identically each time.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How a probe parameter is filled before checking.
#[derive(Clone, Copy, Debug)]
pub enum ProbeInit {
    Normal {
        std: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Positive values bounded away from zero (for gains, variances).
    PositiveUniform {
        lo: f64,
        hi: f64,
    },
}

/// One named parameter of a gradient probe.
#[derive(Clone, Debug)]
pub struct ProbeParam {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: ProbeInit,
}

impl ProbeParam {
    pub fn normal(name: &'static str, shape: &[usize], std: f64) -> Self {
        ProbeParam {
            name,
            shape: shape.to_vec(),
            init: ProbeInit::Normal { std },
        }
    }

    pub fn uniform(name: &'static str, shape: &[usize], lo: f64, hi: f64) -> Self {
        ProbeParam {
            name,
            shape: shape.to_vec(),
            init: ProbeInit::Uniform { lo, hi },
        }
    }

    pub fn positive(name: &'static str, shape: &[usize], lo: f64, hi: f64) -> Self {
        ProbeParam {
            name,
            shape: shape.to_vec(),
            init: ProbeInit::PositiveUniform { lo, hi },
        }
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor in the denominator `max(|analytic|, |central|, eps)`.
const DENOM_EPS: f64 = 1e-8;

pub type BuildFn<'a> =
    &'a dyn Fn(&mut Graph<f64>, &BTreeMap<&'static str, Var>, &mut Rng) -> Result<Var>;

/// Compare recorded gradients with central finite differences.
///
/// Returns the maximum relative error over all probed elements. When
/// `max_probes_per_param` is set, a seeded subset of each parameter's
/// elements is probed instead of every element (necessary for whole-model
/// probes); otherwise every element is checked.
pub fn grad_check(
    seed: u64,
    params: &[ProbeParam],
    max_probes_per_param: Option<usize>,
    build: BuildFn<'_>,
) -> Result<f64> {
    let mut rng = Rng::derive(seed, "gradcheck.params");
    let mut values: Vec<(&'static str, Tensor<f64>)> = Vec::with_capacity(params.len());
    for p in params {
        let t = match p.init {
            ProbeInit::Normal { std } => Tensor::randn(&p.shape, std, &mut rng),
            ProbeInit::Uniform { lo, hi } => Tensor::from_fn(&p.shape, |_| rng.range(lo, hi)),
            ProbeInit::PositiveUniform { lo, hi } => {
                Tensor::from_fn(&p.shape, |_| rng.range(lo, hi))
            }
        };
        values.push((p.name, t));
    }

    let eval = |values: &[(&'static str, Tensor<f64>)]| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let mut vars = BTreeMap::new();
        for (name, t) in values {
            vars.insert(*name, g.param(name, t)?);
        }
        let mut aux = Rng::derive(seed, "gradcheck.aux");
        let loss = build(&mut g, &vars, &mut aux)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::NotScalar(g.value(loss).shape().to_vec()));
        }
        Ok((g, loss))
    };

    let (mut g, loss) = eval(&values)?;
    let grads = g.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    for (pi, (name, base)) in values.iter().enumerate() {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let numel = base.numel();
        let probes: Vec<usize> = match max_probes_per_param {
            Some(k) if k < numel => {
                let mut idx = Rng::derive_indexed(seed, "gradcheck.probe", pi as u64);
                let mut all: Vec<usize> = (0..numel).collect();
                idx.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..numel).collect(),
        };
        for j in probes {
            let mut perturbed = values.to_vec();
            let plus = Tensor::from_fn(base.shape(), |i| {
                base.data()[i] + if i == j { FD_STEP } else { 0.0 }
            });
            perturbed[pi] = (name, plus);
            let (gp, lp) = eval(&perturbed)?;
            let f_plus = gp.value(lp).scalar_value()?;

            let minus = Tensor::from_fn(base.shape(), |i| {
                base.data()[i] - if i == j { FD_STEP } else { 0.0 }
            });
            perturbed[pi] = (name, minus);
            let (gm, lm) = eval(&perturbed)?;
            let f_minus = gm.value(lm).scalar_value()?;

            let central = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            if !central.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(DENOM_EPS);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Named finite-difference suites covering every op, every composed block
/// and the whole training graph. Each entry returns its max relative error;
/// all are expected below `1e-6` (the linear case far below).
pub mod suites {
    use std::collections::BTreeMap;

    use super::{grad_check, ProbeParam};
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::model::{VUNet, VUNetConfig};
    use crate::nn::{Access, ParamStore, ResidualBlock};
    use crate::objective::{kl_sum_graph, total_loss_graph, PerceptualExtractor, ReconMode};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    pub type SuiteResult = Vec<(String, f64)>;

    fn tiny_model_config() -> VUNetConfig {
        VUNetConfig {
            image_size: 8,
            n_blocks: 2,
            z_channels: 2,
            base_width: 2,
            width_cap: 4,
            ..VUNetConfig::default()
        }
    }

    /// Per-op checks: elementwise chain, convolutions, subpixel shuffle,
    /// weight normalization, KL, perceptual loss.
    pub fn ops() -> Result<SuiteResult> {
        let mut out = Vec::new();

        out.push((
            "elementwise(add,mul,scale,exp,ln,abs,leaky_relu,clamp,sum,mean)".to_string(),
            grad_check(
                201,
                &[ProbeParam::uniform("p", &[3, 3], 0.2, 1.0)],
                None,
                &|g, vars, _| {
                    let e = g.exp(vars["p"])?;
                    let l = g.ln(e)?;
                    let sq = g.mul(l, l)?;
                    let sc = g.scale(sq, 0.7)?;
                    let sh = g.add_scalar(sc, 0.3)?;
                    let lr = g.leaky_relu(sh, 0.2)?;
                    let cl = g.clamp(lr, -5.0, 5.0)?;
                    let ab = g.abs(cl)?;
                    let m = g.mean(ab)?;
                    let s = g.sum(ab)?;
                    g.add(m, s)
                },
            )?,
        ));

        out.push((
            "conv2d(stride 1)".to_string(),
            grad_check(
                202,
                &[
                    ProbeParam::normal("w", &[3, 2, 3, 3], 0.3),
                    ProbeParam::normal("b", &[3], 0.2),
                ],
                None,
                &|g, vars, rng| {
                    let x = g.leaf(Tensor::randn(&[2, 5, 5], 1.0, rng))?;
                    let y = g.conv2d(x, vars["w"], Some(vars["b"]), 1)?;
                    let a = g.abs(y)?;
                    g.sum(a)
                },
            )?,
        ));

        out.push((
            "conv2d(stride 2) + pixel_shuffle".to_string(),
            grad_check(
                203,
                &[
                    ProbeParam::normal("w", &[8, 2, 3, 3], 0.3),
                    ProbeParam::normal("b", &[8], 0.2),
                ],
                None,
                &|g, vars, rng| {
                    let x = g.leaf(Tensor::randn(&[2, 6, 6], 1.0, rng))?;
                    let y = g.conv2d(x, vars["w"], Some(vars["b"]), 2)?;
                    let up = g.pixel_shuffle(y, 2)?;
                    let sq = g.mul(up, up)?;
                    g.sum(sq)
                },
            )?,
        ));

        out.push((
            "conv2d(1x1) + concat + slice".to_string(),
            grad_check(
                204,
                &[ProbeParam::normal("w", &[4, 2, 1, 1], 0.4)],
                None,
                &|g, vars, rng| {
                    let x = g.leaf(Tensor::randn(&[2, 4, 4], 1.0, rng))?;
                    let y = g.conv2d(x, vars["w"], None, 1)?;
                    let cat = g.concat_channels(&[y, x])?;
                    let sl = g.channel_slice(cat, 1, 4)?;
                    let a = g.abs(sl)?;
                    g.sum(a)
                },
            )?,
        ));

        out.push((
            "weight_norm".to_string(),
            grad_check(
                205,
                &[
                    ProbeParam::normal("v", &[3, 2, 3, 3], 0.4),
                    ProbeParam::positive("g", &[3], 0.5, 1.5),
                ],
                None,
                &|g, vars, rng| {
                    let x = g.leaf(Tensor::randn(&[2, 4, 4], 1.0, rng))?;
                    let w = g.weight_norm(vars["v"], vars["g"])?;
                    let y = g.conv2d(x, w, None, 2)?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
            )?,
        ));

        out.push((
            "kl_diag_gaussians".to_string(),
            grad_check(
                206,
                &[
                    ProbeParam::normal("qm", &[2, 2], 0.8),
                    ProbeParam::uniform("ql", &[2, 2], -0.8, 0.8),
                    ProbeParam::normal("pm", &[2, 2], 0.8),
                    ProbeParam::uniform("pl", &[2, 2], -0.8, 0.8),
                ],
                None,
                &|g, vars, _| {
                    let q = crate::model::GaussianVars {
                        mean: vars["qm"],
                        logvar: vars["ql"],
                    };
                    let p = crate::model::GaussianVars {
                        mean: vars["pm"],
                        logvar: vars["pl"],
                    };
                    kl_sum_graph(g, &q, &p)
                },
            )?,
        ));

        out.push((
            "perceptual_loss".to_string(),
            grad_check(
                207,
                &[ProbeParam::normal("xbar", &[1, 3, 8, 8], 0.5)],
                None,
                &|g, vars, rng| {
                    let phi = PerceptualExtractor::<f64>::new(13, 8, 3, &[4, 8], 0.2)?;
                    let x = Tensor::randn(&[1, 3, 8, 8], 0.5, rng);
                    let p = crate::model::GaussianVars {
                        mean: g.leaf(Tensor::zeros(&[1, 1, 1, 1]))?,
                        logvar: g.leaf(Tensor::zeros(&[1, 1, 1, 1]))?,
                    };
                    let loss = total_loss_graph(
                        g,
                        &phi,
                        None,
                        &p,
                        &x,
                        vars["xbar"],
                        ReconMode::Perceptual,
                        1.0,
                    )?;
                    Ok(loss.total)
                },
            )?,
        ));

        Ok(out)
    }

    fn store_specs(proto: &ParamStore<f64>) -> Vec<ProbeParam> {
        proto
            .iter()
            .map(|p| {
                let name: &'static str = Box::leak(p.name.clone().into_boxed_str());
                if p.name.ends_with(".g") {
                    ProbeParam::positive(name, p.value.shape(), 0.6, 1.4)
                } else if p.name.ends_with(".b") {
                    ProbeParam::normal(name, p.value.shape(), 0.05)
                } else {
                    ProbeParam::normal(name, p.value.shape(), 0.25)
                }
            })
            .collect()
    }

    /// Composed-block checks: the residual block and a full
    /// downsample/upsample round trip.
    pub fn blocks() -> Result<SuiteResult> {
        let mut out = Vec::new();

        let block = ResidualBlock::new("r", 2, 3, 0.2);
        let mut proto = ParamStore::<f64>::new();
        let mut rng = Rng::derive(211, "blocks.res");
        block.register(&mut proto, &mut rng)?;
        out.push((
            "residual_block".to_string(),
            grad_check(212, &store_specs(&proto), None, &|g, vars, rng| {
                let mut store = ParamStore::<f64>::new();
                for (name, var) in vars.iter() {
                    store.insert(name, g.value(*var).clone())?;
                }
                let x = g.leaf(Tensor::randn(&[2, 4, 4], 1.0, rng))?;
                let block = ResidualBlock::new("r", 2, 3, 0.2);
                let mut acc = Access::Read(&store);
                let y = block.apply(g, &mut acc, x)?;
                // Smooth readout: the only kinks probed are the block's own
                // activations.
                let sq = g.mul(y, y)?;
                g.sum(sq)
            })?,
        ));

        let down = crate::nn::Downsample::new("d", 2, 4);
        let up = crate::nn::Upsample::new("u", 4, 2);
        let mut proto = ParamStore::<f64>::new();
        let mut rng = Rng::derive(213, "blocks.updown");
        down.register(&mut proto, &mut rng)?;
        up.register(&mut proto, &mut rng)?;
        out.push((
            "downsample+upsample".to_string(),
            grad_check(214, &store_specs(&proto), None, &|g, vars, rng| {
                let mut store = ParamStore::<f64>::new();
                for (name, var) in vars.iter() {
                    store.insert(name, g.value(*var).clone())?;
                }
                let x = g.leaf(Tensor::randn(&[2, 6, 6], 1.0, rng))?;
                let down = crate::nn::Downsample::new("d", 2, 4);
                let up = crate::nn::Upsample::new("u", 4, 2);
                let mut acc = Access::Read(&store);
                let d = down.apply(g, &mut acc, x)?;
                let u = up.apply(g, &mut acc, d)?;
                let a = g.abs(u)?;
                g.sum(a)
            })?,
        ));

        Ok(out)
    }

    /// The whole training graph on 8x8 images with `n = 2`, probing a
    /// seeded subset of each parameter tensor.
    pub fn model() -> Result<SuiteResult> {
        let cfg = tiny_model_config();
        let model = VUNet::new(cfg.clone())?;
        let mut proto = ParamStore::<f64>::new();
        let mut rng = Rng::derive(221, "model.proto");
        model.register_params(&mut proto, &mut rng)?;
        let specs = store_specs(&proto);
        let build = move |g: &mut Graph<f64>,
                          vars: &BTreeMap<&'static str, Var>,
                          rng: &mut Rng|
              -> Result<Var> {
            let mut store = ParamStore::<f64>::new();
            for (name, var) in vars.iter() {
                store.insert(name, g.value(*var).clone())?;
            }
            let x = Tensor::randn(&[1, 3, 8, 8], 0.4, rng);
            let y = g.leaf(Tensor::randn(&[1, 3, 8, 8], 0.4, rng))?;
            let app = {
                let mut data = Vec::new();
                data.extend_from_slice(x.data());
                data.extend_from_slice(g.value(y).data());
                g.leaf(Tensor::new(vec![1, 6, 8, 8], data)?)?
            };
            let model = VUNet::new(tiny_model_config())?;
            let mut acc = Access::Read(&store);
            let fwd = model.forward_train(g, &mut acc, y, Some(app), rng)?;
            let phi = PerceptualExtractor::<f64>::new(7, 8, 3, &[4, 8], 0.2)?;
            let loss = total_loss_graph(
                g,
                &phi,
                fwd.q.as_ref(),
                &fwd.p,
                &x,
                fwd.xbar,
                ReconMode::Perceptual,
                1.0,
            )?;
            Ok(loss.total)
        };
        Ok(vec![(
            "forward_train(8x8, n=2)".to_string(),
            grad_check(228, &specs, Some(3), &build)?,
        )])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_is_exact() {
        // Pure linear map: central differences are exact up to rounding.
        let params = [
            ProbeParam::normal("w", &[2, 3, 3, 3], 0.3),
            ProbeParam::normal("b", &[2], 0.3),
        ];
        let err = grad_check(17, &params, None, &|g, vars, rng| {
            let x = g.leaf(Tensor::randn(&[3, 4, 4], 1.0, rng))?;
            let y = g.conv2d(x, vars["w"], Some(vars["b"]), 1)?;
            g.sum(y)
        })
        .unwrap();
        assert!(err < 1e-9, "linear gradcheck error {err}");
    }

    #[test]
    fn elementwise_chain() {
        let params = [ProbeParam::uniform("p", &[3, 3], 0.2, 1.0)];
        let err = grad_check(5, &params, None, &|g, vars, _| {
            let e = g.exp(vars["p"])?;
            let l = g.ln(e)?;
            let s = g.mul(l, l)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < 1e-6, "elementwise gradcheck error {err}");
    }

    #[test]
    fn conv_pixel_shuffle_chain() {
        // Gradient through conv2d + pixel_shuffle against central differences.
        let params = [
            ProbeParam::normal("w", &[8, 2, 3, 3], 0.3),
            ProbeParam::normal("b", &[8], 0.2),
        ];
        let err = grad_check(23, &params, None, &|g, vars, rng| {
            let x = g.leaf(Tensor::randn(&[2, 5, 5], 1.0, rng))?;
            let y = g.conv2d(x, vars["w"], Some(vars["b"]), 1)?;
            let up = g.pixel_shuffle(y, 2)?;
            let a = g.abs(up)?;
            g.sum(a)
        })
        .unwrap();
        assert!(err < 1e-6, "conv+shuffle gradcheck error {err}");
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        // Pre-activations bounded away from 0 by more than 10 * FD_STEP.
        let params = [ProbeParam::uniform("p", &[8], 0.01, 1.0)];
        let err = grad_check(7, &params, None, &|g, vars, _| {
            let shifted = g.add_scalar(vars["p"], 0.5)?; // > 0.5 >> 10h
            let pos = g.leaky_relu(shifted, 0.2)?;
            let neg_in = g.add_scalar(vars["p"], -2.0)?; // < -1 << -10h
            let neg = g.leaky_relu(neg_in, 0.2)?;
            let s1 = g.sum(pos)?;
            let s2 = g.sum(neg)?;
            g.add(s1, s2)
        })
        .unwrap();
        assert!(err < 1e-6, "leaky_relu gradcheck error {err}");
    }

    #[test]
    fn weight_norm_gradients() {
        let params = [
            ProbeParam::normal("v", &[3, 2, 3, 3], 0.4),
            ProbeParam::positive("g", &[3], 0.5, 1.5),
        ];
        let err = grad_check(31, &params, None, &|g, vars, rng| {
            let x = g.leaf(Tensor::randn(&[2, 4, 4], 1.0, rng))?;
            let w = g.weight_norm(vars["v"], vars["g"])?;
            let y = g.conv2d(x, w, None, 2)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-6, "weight_norm gradcheck error {err}");
    }
}
