//! Optimization loop and model runtime.
//!
//! Training is a strictly serial state machine: assemble batch, forward,
//! loss, backward, Adam step. All per-step randomness (batch order, the
//! reparameterization noise) derives statelessly from `(seed, step)`, so a
//! run is bitwise reproducible and a checkpoint resume continues exactly
//! where the saved run left off.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, Config};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::VUNet;
use crate::nn::{Access, ParamStore};
use crate::objective::{total_loss_graph, LossReport, PerceptualExtractor, PERCEPTUAL_WIDTHS};
use crate::optim::{AdamConfig, OptimState};
use crate::par;
use crate::rng::Rng;
use crate::shapeio::{
    limb_crops, load_pgm, load_ppm, parse_manifest, render_stickman, stickman_palette, KeypointSet,
    ShapeSource,
};
use crate::synthglyph::{is_validation, manifest_seed};
use crate::tensor::Tensor;

/// One dataset sample with its precomputed shape map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub keypoints: Option<KeypointSet>,
    pub shape_map: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Load every manifest entry, render shape maps, and split 90/10 by the
/// seeded hash of the image id (the manifest's generation seed when
/// present, the training seed otherwise).
pub fn load_dataset(config: &Config) -> Result<LoadedDataset> {
    let entries = parse_manifest(&config.data.manifest)?;
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} has no samples",
            config.data.manifest.display()
        )));
    }
    let split_seed = manifest_seed(&config.data.manifest).unwrap_or(config.train.seed);
    let size = config.model.image_size;
    let palette = stickman_palette();
    let loaded: Vec<Result<Sample>> = par::map_indexed(entries.len(), |i| {
        let e = &entries[i];
        let image = load_ppm(&e.image_path)?;
        if image.shape() != [3, size, size] {
            return Err(Error::Data(format!(
                "{}: image is {:?}, config expects [3, {size}, {size}]",
                e.image_path.display(),
                image.shape()
            )));
        }
        let (keypoints, shape_map) = match &e.shape {
            ShapeSource::Keypoints(k) => {
                if config.model.shape_channels != 3 {
                    return Err(Error::Data(
                        "keypoint manifest requires shape_channels = 3".into(),
                    ));
                }
                (Some(k.clone()), render_stickman(k, size, &palette))
            }
            ShapeSource::EdgePath(p) => {
                if config.model.shape_channels != 1 {
                    return Err(Error::Data(
                        "edge manifest requires shape_channels = 1".into(),
                    ));
                }
                let m = load_pgm(p)?;
                if m.shape() != [1, size, size] {
                    return Err(Error::Data(format!(
                        "{}: edge map is {:?}, expected [1, {size}, {size}]",
                        p.display(),
                        m.shape()
                    )));
                }
                (None, m)
            }
        };
        Ok(Sample {
            id: e.id.clone(),
            image,
            keypoints,
            shape_map,
        })
    });
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in loaded {
        let s = s?;
        if is_validation(split_seed, &s.id) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok(LoadedDataset { train, val })
}

/// Everything needed to run the model: config, layer descriptors,
/// parameters and the frozen perceptual extractor.
pub struct ModelCtx {
    pub config: Config,
    pub model: VUNet,
    pub store: ParamStore<f32>,
    pub phi: PerceptualExtractor<f32>,
}

fn adam_config(config: &Config) -> AdamConfig {
    AdamConfig {
        base_lr: config.train.base_lr,
        total_steps: config.train.total_steps,
        ..AdamConfig::default()
    }
}

impl ModelCtx {
    /// Fresh model with seeded random directions (`g`, `b` still at their
    /// pre-init values until [`init_pass`] runs).
    pub fn fresh(config: Config) -> Result<Self> {
        let model = VUNet::new(config.model.clone())?;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(config.train.seed, "init.params");
        model.register_params(&mut store, &mut rng)?;
        let phi = PerceptualExtractor::new(
            config.train.seed,
            config.model.image_size,
            config.model.image_channels,
            &PERCEPTUAL_WIDTHS,
            config.model.alpha,
        )?;
        Ok(ModelCtx {
            config,
            model,
            store,
            phi,
        })
    }

    /// Rebuild a model and its optimizer state from a checkpoint.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, OptimState)> {
        let ck = Checkpoint::load(path)?;
        let config = Config::parse(&ck.config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut ctx = ModelCtx::fresh(config)?;
        let mut optim = OptimState::new(adam_config(&ctx.config), &ctx.store);
        ck.restore(&mut ctx.store, &mut optim)?;
        Ok((ctx, optim))
    }

    pub fn optimizer(&self) -> OptimState {
        OptimState::new(adam_config(&self.config), &self.store)
    }

    /// The appearance encoder's input for one sample: stacked limb crops in
    /// in-plane mode, otherwise the channel-concatenated image + shape map.
    pub fn appearance_input(&self, s: &Sample) -> Result<Tensor<f32>> {
        if self.config.model.in_plane_normalization {
            let k = s.keypoints.as_ref().ok_or_else(|| {
                Error::Data("in-plane normalization needs keypoint annotations".into())
            })?;
            limb_crops(&s.image, k, self.config.model.crop_size)
        } else {
            let (_, ci, h, w) = s.image.dims_nchw()?;
            let (_, cs, _, _) = s.shape_map.dims_nchw()?;
            let mut data = Vec::with_capacity((ci + cs) * h * w);
            data.extend_from_slice(s.image.data());
            data.extend_from_slice(s.shape_map.data());
            Tensor::new(vec![ci + cs, h, w], data)
        }
    }

    /// Posterior-mean reconstruction (the transfer-to-self case). Under the
    /// no-appearance ablation this is the deterministic decode of the shape
    /// map alone.
    pub fn reconstruct(&self, s: &Sample) -> Result<Tensor<f32>> {
        if self.config.model.use_appearance {
            self.transfer(s, &s.shape_map)
        } else {
            let mut g = Graph::new();
            let y = g.leaf(s.shape_map.clone())?;
            let mut acc = Access::Read(&self.store);
            let enc = self.model.encode_shape(&mut g, &mut acc, y)?;
            let out = self.model.decode(&mut g, &mut acc, &enc, None)?;
            Ok(g.value(out).clone())
        }
    }

    /// Generation from the learned conditional prior.
    pub fn sample_prior(&self, shape_map: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let y = g.leaf(shape_map.clone())?;
        let mut acc = Access::Read(&self.store);
        let out = self.model.forward_sample(&mut g, &mut acc, y, rng)?;
        Ok(g.value(out).clone())
    }

    /// Posterior-mean appearance from `appearance_source`, decoded against
    /// an arbitrary target shape map.
    pub fn transfer(
        &self,
        appearance_source: &Sample,
        target_shape: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let app = self.appearance_input(appearance_source)?;
        let mut g = Graph::new();
        let appv = g.leaf(app)?;
        let y = g.leaf(target_shape.clone())?;
        let mut acc = Access::Read(&self.store);
        let out = self.model.forward_transfer(&mut g, &mut acc, appv, y)?;
        Ok(g.value(out).clone())
    }
}

/// Deterministic epoch permutation.
fn permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    Rng::derive_indexed(seed, "shuffle", epoch as u64).shuffle(&mut v);
    v
}

/// Training-sample indices of one step, derived statelessly from the seed:
/// the infinite stream walks seeded epoch permutations back to back.
pub fn batch_indices(seed: u64, n_train: usize, batch: usize, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let global = step * batch + j;
        let epoch = global / n_train;
        let within = global % n_train;
        let perm = match &cached {
            Some((e, p)) if *e == epoch => p,
            _ => {
                cached = Some((epoch, permutation(seed, epoch, n_train)));
                &cached.as_ref().unwrap().1
            }
        };
        out.push(perm[within]);
    }
    out
}

fn stack(tensors: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = tensors[0].shape().to_vec();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
    for t in tensors {
        if t.shape() != first {
            return Err(Error::ShapeMismatch("ragged batch".into()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(&first);
    Tensor::new(shape, data)
}

/// (images, shape maps, appearance inputs) of one batch.
type BatchTensors = (Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>);

fn batch_tensors(ctx: &ModelCtx, batch: &[&Sample]) -> Result<BatchTensors> {
    let images: Vec<Tensor<f32>> = batch.iter().map(|s| s.image.clone()).collect();
    let shapes: Vec<Tensor<f32>> = batch.iter().map(|s| s.shape_map.clone()).collect();
    let x = stack(&images)?;
    let y = stack(&shapes)?;
    let app = if ctx.config.model.use_appearance {
        let inputs: Vec<Tensor<f32>> = batch
            .iter()
            .map(|s| ctx.appearance_input(s))
            .collect::<Result<_>>()?;
        Some(stack(&inputs)?)
    } else {
        None
    };
    Ok((x, y, app))
}

/// Data-dependent initialization pass: one forward over the first training
/// batch with every weight-normalized layer re-deriving its gain and bias
/// from the activations flowing past it (earlier layers already
/// initialized).
pub fn init_pass(ctx: &mut ModelCtx, ds: &LoadedDataset) -> Result<()> {
    let cfg = &ctx.config;
    if cfg.train.batch_size == 1 {
        eprintln!(
            "warning: data-dependent init on a batch of 1; variance estimates are degenerate"
        );
    }
    let idxs = batch_indices(cfg.train.seed, ds.train.len(), cfg.train.batch_size, 0);
    let batch: Vec<&Sample> = idxs.iter().map(|&i| &ds.train[i]).collect();
    let (_, y, app) = batch_tensors(ctx, &batch)?;
    let mut g = Graph::new();
    let yv = g.leaf(y)?;
    let appv = match app {
        Some(a) => Some(g.leaf(a)?),
        None => None,
    };
    let mut eps_rng = Rng::derive(cfg.train.seed, "init.eps");
    let model = &ctx.model;
    let mut acc = Access::Init(&mut ctx.store);
    model.forward_train(&mut g, &mut acc, yv, appv, &mut eps_rng)?;
    Ok(())
}

/// One optimization step. Batch composition and the sampling noise depend
/// only on `(seed, step)`.
pub fn train_step(
    ctx: &mut ModelCtx,
    optim: &mut OptimState,
    ds: &LoadedDataset,
    step: usize,
) -> Result<LossReport> {
    let cfg = ctx.config.clone();
    let idxs = batch_indices(cfg.train.seed, ds.train.len(), cfg.train.batch_size, step);
    let batch: Vec<&Sample> = idxs.iter().map(|&i| &ds.train[i]).collect();
    let (x, y, app) = batch_tensors(ctx, &batch)?;
    let mut g = Graph::new();
    let yv = g.leaf(y)?;
    let appv = match app {
        Some(a) => Some(g.leaf(a)?),
        None => None,
    };
    let mut eps_rng = Rng::derive_indexed(cfg.train.seed, "train.eps", step as u64);
    let (report, grads) = {
        let mut acc = Access::Read(&ctx.store);
        let fwd = ctx
            .model
            .forward_train(&mut g, &mut acc, yv, appv, &mut eps_rng)?;
        let kl_weight = if cfg.train.ablation == Ablation::NoKl {
            0.0
        } else {
            cfg.train.kl_weight
        };
        let loss = total_loss_graph(
            &mut g,
            &ctx.phi,
            fwd.q.as_ref(),
            &fwd.p,
            &x,
            fwd.xbar,
            cfg.train.mode,
            kl_weight,
        )?;
        let report = loss.report(&g)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        (report, g.backward(loss.total)?)
    };
    optim.step(&mut ctx.store, &grads, cfg.train.grad_clip)?;
    Ok(report)
}

/// Decimal with `digits` significant digits (plain notation).
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return format!("{:.*}", digits - 1, 0.0);
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_report: Option<LossReport>,
}

fn dump_nonfinite_diagnostics(ctx: &ModelCtx, ds: &LoadedDataset, step: usize) {
    let cfg = &ctx.config;
    let idxs = batch_indices(cfg.train.seed, ds.train.len(), cfg.train.batch_size, step);
    let ids: Vec<&str> = idxs.iter().map(|&i| ds.train[i].id.as_str()).collect();
    eprintln!(
        "non-finite loss at step {step}; batch samples: {}",
        ids.join(" ")
    );
    for prefix in ["e_theta", "f_phi", "d_theta"] {
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for p in ctx.store.iter() {
            if p.name.starts_with(prefix) {
                sq += p
                    .value
                    .data()
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>();
                count += p.value.numel();
            }
        }
        if count > 0 {
            eprintln!("  |{prefix}| = {:.6e} over {count} values", sq.sqrt());
        }
    }
}

/// Full training run: data-dependent init, `total_steps` optimization
/// steps, a metrics log line per step (`step<TAB>total<TAB>kl<TAB>recon`,
/// six significant digits), periodic checkpoints and quick validation
/// evaluations, and a final checkpoint.
pub fn train(config: &Config, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let ds = load_dataset(config)?;
    if ds.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut ctx = ModelCtx::fresh(config.clone())?;
    let mut optim = OptimState::new(adam_config(config), &ctx.store);
    init_pass(&mut ctx, &ds)?;

    let config_text = config.to_text();
    let metrics_path = out_dir.join("metrics.log");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let mut last = None;
    for step in 0..config.train.total_steps {
        let report = match train_step(&mut ctx, &mut optim, &ds, step) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) | Err(Error::NonFiniteLoss { .. }) => {
                dump_nonfinite_diagnostics(&ctx, &ds, step);
                return Err(Error::NonFiniteLoss { step, batch: step });
            }
            Err(e) => return Err(e),
        };
        writeln!(
            metrics,
            "{step}\t{}\t{}\t{}",
            format_sig(report.total, 6),
            format_sig(report.kl, 6),
            format_sig(report.reconstruction, 6)
        )?;
        let done = step + 1;
        if config.train.checkpoint_every > 0 && done % config.train.checkpoint_every == 0 {
            Checkpoint::from_state(&config_text, &ctx.store, &optim)
                .save(&out_dir.join(format!("ckpt_{done:06}.vun")))?;
        }
        if config.train.eval_every > 0 && done % config.train.eval_every == 0 {
            let val = if ds.val.is_empty() {
                &ds.train
            } else {
                &ds.val
            };
            let (l1, ssim_mean, _, _) = crate::eval::reconstruction_metrics(&ctx, val, 16)?;
            writeln!(
                metrics,
                "eval:\t{done}\trecon_l1={}\tssim={}",
                format_sig(l1, 6),
                format_sig(ssim_mean, 6)
            )?;
        }
        last = Some(report);
    }
    metrics.flush()?;
    let final_checkpoint = out_dir.join("final.vun");
    Checkpoint::from_state(&config_text, &ctx.store, &optim).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_path,
        last_report: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stream_is_epoch_exhaustive_and_deterministic() {
        let n = 10;
        let batch = 4;
        // One epoch's worth of indices covers every sample at least... the
        // stream walks each permutation exactly once before the next epoch.
        let mut seen = vec![0usize; n];
        for step in 0..5 {
            for i in batch_indices(7, n, batch, step) {
                seen[i] += 1;
            }
        }
        // 20 draws over 10 samples = each exactly twice.
        assert!(seen.iter().all(|&c| c == 2), "{seen:?}");
        assert_eq!(batch_indices(7, n, batch, 3), batch_indices(7, n, batch, 3));
        assert_ne!(batch_indices(7, n, batch, 0), batch_indices(8, n, batch, 0));
    }

    #[test]
    fn format_sig_examples() {
        assert_eq!(format_sig(0.0, 6), "0.00000");
        assert_eq!(format_sig(1.0, 6), "1.00000");
        assert_eq!(format_sig(0.00123456789, 6), "0.00123457");
        assert_eq!(format_sig(123456.7, 6), "123457");
        assert_eq!(format_sig(-2.5, 6), "-2.50000");
    }
}
