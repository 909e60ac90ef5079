//! Quantitative evaluation: SSIM, matched-filter joint re-localization,
//! oracle transfer error and appearance-consistency statistics.
//!
//! The joint detector replaces a learned pose estimator. It exploits the
//! glyph's fixed-hue marker discs: per joint, a hue/saturation mask of the
//! image is correlated with an anti-aliased disc template and the
//! normalized-cross-correlation argmax gives the detection. The detector
//! self-tests against oracle renders before any model-quality conclusion
//! rests on it.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::shapeio::{rgb_to_hsv, Joint, KeypointSet};
use crate::synthglyph::{
    marker_radius, oracle_transfer_target, pose_joints, sample_factors, GlyphAppearance, GlyphPose,
    MARKER_HUES,
};
use crate::tensor::Tensor;
use crate::trainer::{LoadedDataset, ModelCtx, Sample};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-padding separable Gaussian filter of an `h x w` plane.
fn gauss_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_window();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            tmp[y * wo + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean SSIM between two images in `[0, 1]` (dynamic range 1): 11x11
/// Gaussian window with sigma 1.5, valid padding, computed per channel and
/// averaged.
pub fn ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (n, c, h, w) = x.dims_nchw()?;
    if n != 1 {
        return Err(Error::ShapeMismatch("ssim expects single images".into()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xs: Vec<f64> = x.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let ys: Vec<f64> = y.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mu_x = gauss_valid(&xs, h, w);
        let mu_y = gauss_valid(&ys, h, w);
        let m_xx = gauss_valid(&xx, h, w);
        let m_yy = gauss_valid(&yy, h, w);
        let m_xy = gauss_valid(&xy, h, w);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - mx * mx;
            let var_y = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            let v = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
            acc += v;
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / c as f64)
}

/// Soft marker mask weight for one pixel against a target hue.
fn marker_weight(r: f64, g: f64, b: f64, target_hue: f64) -> f64 {
    let (h, s, v) = rgb_to_hsv(r, g, b);
    let dh = {
        let d = (h - target_hue).rem_euclid(360.0);
        d.min(360.0 - d)
    };
    let hue_w = ((14.0 - dh) / 14.0).clamp(0.0, 1.0);
    let sat_w = ((s - 0.70) / 0.20).clamp(0.0, 1.0);
    let val_w = ((v - 0.70) / 0.20).clamp(0.0, 1.0);
    hue_w * sat_w * val_w
}

/// Re-estimate the joint positions of a generated glyph image by matched
/// filtering: per joint, the argmax of the normalized cross-correlation
/// between the joint's hue mask and an anti-aliased disc template. Peaks
/// below 0.3 mark the joint invisible.
pub fn relocalize_joints(img: &Tensor<f32>) -> Result<KeypointSet> {
    let (n, c, h, w) = img.dims_nchw()?;
    if n != 1 || c != 3 || h != w {
        return Err(Error::ShapeMismatch(format!(
            "relocalize_joints expects one square [3, S, S] image, got {:?}",
            img.shape()
        )));
    }
    let size = h;
    let plane = size * size;
    let radius = marker_radius(size);
    let half = (radius + 0.5).ceil() as isize + 1;
    let win = (2 * half + 1) as usize;

    // Disc template and its statistics.
    let mut tmpl = vec![0.0f64; win * win];
    for dy in -half..=half {
        for dx in -half..=half {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            tmpl[((dy + half) as usize) * win + (dx + half) as usize] =
                (radius + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    let t_mean = tmpl.iter().sum::<f64>() / tmpl.len() as f64;
    let t_var: f64 = tmpl.iter().map(|v| (v - t_mean) * (v - t_mean)).sum();

    let joints: Vec<Joint> = par::map_indexed(MARKER_HUES.len(), |j| {
        let hue = MARKER_HUES[j];
        let mask: Vec<f64> = (0..plane)
            .map(|i| {
                marker_weight(
                    img.data()[i] as f64,
                    img.data()[plane + i] as f64,
                    img.data()[2 * plane + i] as f64,
                    hue,
                )
            })
            .collect();
        // Zero outside the image.
        let sample = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                0.0
            } else {
                mask[y as usize * size + x as usize]
            }
        };
        let mut best = (0.0f64, 0usize, 0usize);
        for py in 0..size {
            for px in 0..size {
                let mut m_sum = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        m_sum += sample(px as isize + dx, py as isize + dy);
                    }
                }
                let m_mean = m_sum / (win * win) as f64;
                let mut num = 0.0;
                let mut m_var = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let mv = sample(px as isize + dx, py as isize + dy) - m_mean;
                        let tv = tmpl[((dy + half) as usize) * win + (dx + half) as usize] - t_mean;
                        num += mv * tv;
                        m_var += mv * mv;
                    }
                }
                let denom = (m_var * t_var).sqrt();
                if denom > 1e-12 {
                    let ncc = num / denom;
                    if ncc > best.0 {
                        best = (ncc, px, py);
                    }
                }
            }
        }
        if best.0 < 0.3 {
            Joint {
                x: 0.0,
                y: 0.0,
                visible: false,
            }
        } else {
            Joint {
                x: best.1 as f32 + 0.5,
                y: best.2 as f32 + 0.5,
                visible: true,
            }
        }
    });
    Ok(KeypointSet { joints })
}

/// Mean L2 distance over joints visible in both sets; `None` when no joint
/// qualifies.
pub fn mean_visible_l2(a: &KeypointSet, b: &KeypointSet) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ja, jb) in a.joints.iter().zip(&b.joints) {
        if ja.visible && jb.visible {
            let (dx, dy) = ((ja.x - jb.x) as f64, (ja.y - jb.y) as f64);
            sum += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Quantitative report over one trained model.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub recon_l1_mean: f64,
    pub recon_count: usize,
    pub pose_l2_mean: f64,
    pub pose_baseline_l2: f64,
    pub pose_count: usize,
    pub transfer_l1_mean: f64,
    pub transfer_shuffled_l1_mean: f64,
    pub transfer_count: usize,
    pub appearance_std_norm: f64,
    pub appearance_max_pairwise: f64,
    pub appearance_groups: usize,
}

impl EvalReport {
    /// Flat `key = value` serialization. Metrics whose count is zero (not
    /// computed for this model or dataset) are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: f64| {
            let _ = writeln!(s, "{k} = {}", crate::trainer::format_sig(v, 6));
        };
        kv("ssim_mean", self.ssim_mean);
        kv("ssim_std", self.ssim_std);
        kv("recon_l1_mean", self.recon_l1_mean);
        if self.pose_count > 0 {
            kv("pose_l2_mean", self.pose_l2_mean);
            kv("pose_baseline_l2", self.pose_baseline_l2);
        }
        if self.transfer_count > 0 {
            kv("transfer_l1_mean", self.transfer_l1_mean);
            kv("transfer_shuffled_l1_mean", self.transfer_shuffled_l1_mean);
        }
        if self.appearance_groups > 0 {
            kv("appearance_std_norm", self.appearance_std_norm);
            kv("appearance_max_pairwise", self.appearance_max_pairwise);
        }
        let _ = writeln!(s, "recon_count = {}", self.recon_count);
        let _ = writeln!(s, "pose_count = {}", self.pose_count);
        let _ = writeln!(s, "transfer_count = {}", self.transfer_count);
        let _ = writeln!(s, "appearance_groups = {}", self.appearance_groups);
        s
    }

    /// Every computed field is finite.
    pub fn all_finite(&self) -> bool {
        let mut vals = vec![self.ssim_mean, self.ssim_std, self.recon_l1_mean];
        if self.pose_count > 0 {
            vals.extend([self.pose_l2_mean, self.pose_baseline_l2]);
        }
        if self.transfer_count > 0 {
            vals.extend([self.transfer_l1_mean, self.transfer_shuffled_l1_mean]);
        }
        if self.appearance_groups > 0 {
            vals.extend([self.appearance_std_norm, self.appearance_max_pairwise]);
        }
        vals.iter().all(|v| v.is_finite())
    }
}

/// Posterior-mean reconstruction quality over validation samples: mean
/// per-pixel L1 and SSIM statistics.
pub fn reconstruction_metrics(
    ctx: &ModelCtx,
    samples: &[Sample],
    limit: usize,
) -> Result<(f64, f64, f64, usize)> {
    let take = samples.len().min(limit);
    if take == 0 {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let results: Vec<Result<(f64, f64)>> = par::map_indexed(take, |i| {
        let s = &samples[i];
        let recon = clamp01(&ctx.reconstruct(s)?);
        let l1 = recon.mean_abs_diff(&s.image);
        let sv = ssim(&s.image, &recon)?;
        Ok((l1, sv))
    });
    let mut l1_sum = 0.0;
    let mut ssims = Vec::with_capacity(take);
    for r in results {
        let (l1, sv) = r?;
        l1_sum += l1;
        ssims.push(sv);
    }
    let ssim_mean = ssims.iter().sum::<f64>() / take as f64;
    let ssim_var = ssims
        .iter()
        .map(|v| (v - ssim_mean) * (v - ssim_mean))
        .sum::<f64>()
        / take as f64;
    Ok((l1_sum / take as f64, ssim_mean, ssim_var.sqrt(), take))
}

/// Pose preservation: generate from the prior for each conditioning shape,
/// re-localize joints and compare with the conditioning keypoints. The
/// baseline pairs the same conditioning keypoints with an independently
/// sampled random pose.
pub fn pose_preservation_error(
    ctx: &ModelCtx,
    samples: &[Sample],
    limit: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let size = ctx.config.model.image_size;
    let candidates: Vec<&Sample> = samples.iter().filter(|s| s.keypoints.is_some()).collect();
    let take = candidates.len().min(limit);
    if take == 0 {
        return Err(Error::Data("pose evaluation needs keypoint samples".into()));
    }
    let results: Vec<Result<(Option<f64>, Option<f64>)>> = par::map_indexed(take, |i| {
        let s = candidates[i];
        let truth = s.keypoints.as_ref().expect("filtered");
        let mut rng = Rng::derive_indexed(seed, "eval.pose", i as u64);
        let gen = clamp01(&ctx.sample_prior(&s.shape_map, &mut rng)?);
        let detected = relocalize_joints(&gen)?;
        let err = mean_visible_l2(truth, &detected);
        let mut rng_b = Rng::derive_indexed(seed, "eval.pose.baseline", i as u64);
        let (random_pose, _) = sample_factors(&mut rng_b);
        let random_joints = pose_joints(&random_pose, size);
        let baseline = mean_visible_l2(truth, &random_joints);
        Ok((err, baseline))
    });
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    let mut base_sum = 0.0;
    let mut base_n = 0usize;
    for r in results {
        let (e, b) = r?;
        if let Some(e) = e {
            err_sum += e;
            err_n += 1;
        }
        if let Some(b) = b {
            base_sum += b;
            base_n += 1;
        }
    }
    if err_n == 0 || base_n == 0 {
        return Err(Error::Data(
            "joint detector marked everything invisible".into(),
        ));
    }
    Ok((err_sum / err_n as f64, base_sum / base_n as f64, err_n))
}

/// Transfer error against oracle renders over `pairs` random (appearance
/// source, pose target) pairs, plus the shuffled-appearance control where
/// the oracle uses a third sample's appearance.
pub fn transfer_error(
    ctx: &ModelCtx,
    samples: &[Sample],
    factors: &[(String, GlyphPose, GlyphAppearance)],
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let size = ctx.config.model.image_size;
    let indexed: Vec<(&Sample, &GlyphPose, &GlyphAppearance)> = samples
        .iter()
        .filter_map(|s| {
            factors
                .iter()
                .find(|(id, _, _)| *id == s.id)
                .map(|(_, p, a)| (s, p, a))
        })
        .collect();
    if indexed.len() < 3 {
        return Err(Error::Data(
            "transfer evaluation needs at least 3 samples with factors".into(),
        ));
    }
    let picks: Vec<(usize, usize, usize)> = {
        let mut rng = Rng::derive(seed, "eval.transfer.pairs");
        (0..pairs)
            .map(|_| {
                let a = rng.below(indexed.len());
                let b = loop {
                    let b = rng.below(indexed.len());
                    if b != a {
                        break b;
                    }
                };
                let c = loop {
                    let c = rng.below(indexed.len());
                    if c != a {
                        break c;
                    }
                };
                (a, b, c)
            })
            .collect()
    };
    let results: Vec<Result<(f64, f64)>> = par::map_indexed(picks.len(), |i| {
        let (a, b, c) = picks[i];
        let (sample_a, _, app_a) = indexed[a];
        let (sample_b, pose_b, _) = indexed[b];
        let (_, _, app_c) = indexed[c];
        let generated = clamp01(&ctx.transfer(sample_a, &sample_b.shape_map)?);
        let oracle = oracle_transfer_target(pose_b, app_a, size);
        let control = oracle_transfer_target(pose_b, app_c, size);
        Ok((
            generated.mean_abs_diff(&oracle),
            generated.mean_abs_diff(&control),
        ))
    });
    let mut t_sum = 0.0;
    let mut s_sum = 0.0;
    let mut n = 0usize;
    for r in results {
        let (t, s) = r?;
        t_sum += t;
        s_sum += s;
        n += 1;
    }
    Ok((t_sum / n as f64, s_sum / n as f64, n))
}

/// Appearance consistency: transfer each of `groups` appearance sources
/// onto `group_size` target shapes, embed every generation with the frozen
/// extractor's deepest stage, and report the mean (over groups) of the
/// std-vector norm and of the max pairwise embedding distance.
pub fn appearance_consistency(
    ctx: &ModelCtx,
    samples: &[Sample],
    groups: usize,
    group_size: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    if group_size < 2 {
        return Err(Error::Data(
            "appearance groups need at least 2 images".into(),
        ));
    }
    if samples.len() < group_size + 1 {
        return Err(Error::Data(
            "not enough samples for appearance groups".into(),
        ));
    }
    let mut rng = Rng::derive(seed, "eval.consistency");
    let mut assignments = Vec::with_capacity(groups);
    for _ in 0..groups {
        let src = rng.below(samples.len());
        let mut targets = Vec::with_capacity(group_size);
        while targets.len() < group_size {
            let t = rng.below(samples.len());
            if t != src && !targets.contains(&t) {
                targets.push(t);
            }
        }
        assignments.push((src, targets));
    }
    let per_group: Vec<Result<(f64, f64)>> = par::map_indexed(groups, |gi| {
        let (src, targets) = &assignments[gi];
        let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(group_size);
        for &t in targets {
            let img = clamp01(&ctx.transfer(&samples[*src], &samples[t].shape_map)?);
            let e = ctx.phi.embeddings(&img)?;
            embeddings.push(e.into_iter().next().expect("single image"));
        }
        let dim = embeddings[0].len();
        let m = embeddings.len() as f64;
        let mut std_sq = 0.0;
        for d in 0..dim {
            let mean: f64 = embeddings.iter().map(|e| e[d]).sum::<f64>() / m;
            let var: f64 = embeddings
                .iter()
                .map(|e| (e[d] - mean) * (e[d] - mean))
                .sum::<f64>()
                / m;
            std_sq += var;
        }
        let mut max_pair = 0.0f64;
        for i in 0..embeddings.len() {
            for j in i + 1..embeddings.len() {
                let d: f64 = embeddings[i]
                    .iter()
                    .zip(&embeddings[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                max_pair = max_pair.max(d.sqrt());
            }
        }
        Ok((std_sq.sqrt(), max_pair))
    });
    let mut std_sum = 0.0;
    let mut pair_sum = 0.0;
    for r in per_group {
        let (s, p) = r?;
        std_sum += s;
        pair_sum += p;
    }
    Ok((std_sum / groups as f64, pair_sum / groups as f64, groups))
}

/// Full evaluation report over a dataset (validation split for
/// reconstruction/pose, train+val for transfer sources).
pub fn evaluate(
    ctx: &ModelCtx,
    ds: &LoadedDataset,
    factors: Option<&[(String, GlyphPose, GlyphAppearance)]>,
    seed: u64,
) -> Result<EvalReport> {
    let eval_cfg = &ctx.config.eval;
    let val = if ds.val.is_empty() {
        &ds.train
    } else {
        &ds.val
    };
    let (recon_l1, ssim_mean, ssim_std, recon_count) =
        reconstruction_metrics(ctx, val, eval_cfg.max_samples)?;
    let (pose_err, pose_base, pose_count) = if ctx.config.model.shape_channels == 3 {
        pose_preservation_error(ctx, val, eval_cfg.max_samples, seed)?
    } else {
        (f64::NAN, f64::NAN, 0)
    };
    let all: Vec<Sample> = ds.train.iter().chain(ds.val.iter()).cloned().collect();
    let (transfer, shuffled, transfer_count) = match (factors, ctx.config.model.use_appearance) {
        (Some(f), true) => transfer_error(ctx, &all, f, eval_cfg.transfer_pairs, seed)?,
        _ => (f64::NAN, f64::NAN, 0),
    };
    let (std_norm, max_pair, groups) = if ctx.config.model.use_appearance {
        appearance_consistency(ctx, &all, eval_cfg.groups, eval_cfg.group_size, seed)?
    } else {
        (f64::NAN, f64::NAN, 0)
    };
    Ok(EvalReport {
        ssim_mean,
        ssim_std,
        recon_l1_mean: recon_l1,
        recon_count,
        pose_l2_mean: pose_err,
        pose_baseline_l2: pose_base,
        pose_count,
        transfer_l1_mean: transfer,
        transfer_shuffled_l1_mean: shuffled,
        transfer_count,
        appearance_std_norm: std_norm,
        appearance_max_pairwise: max_pair,
        appearance_groups: groups,
    })
}
