//! The three networks and their composition.
//!
//! The shape encoder consumes the shape map and produces per-resolution
//! skip activations, a bottleneck feature and the parameters of the
//! conditional prior over the appearance code. The appearance encoder (same
//! stage structure) maps its input to the posterior over the code. The
//! decoder walks back up through subpixel upsampling, concatenating the
//! matching skip before each residual block; its sole entry point for
//! appearance is the channel concatenation of the bottleneck with `z`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Access, Downsample, ParamStore, ResidualBlock, Upsample, WnConv};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Clamp range applied to every predicted log-variance before use.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct VUNetConfig {
    /// Square input resolution; must be a power of two.
    pub image_size: usize,
    /// Number of encoder stages `n` (the generator has `2n` residual blocks
    /// plus a bottleneck block on each side of the U).
    pub n_blocks: usize,
    /// Channels of the appearance code `z` at bottleneck resolution.
    pub z_channels: usize,
    /// Channel width at full resolution, doubled per downsampling stage.
    pub base_width: usize,
    /// Upper bound on stage widths.
    pub width_cap: usize,
    /// Negative slope of the leaky ReLU activations.
    pub alpha: f64,
    /// 3 for stickman shape maps, 1 for edge maps.
    pub shape_channels: usize,
    pub image_channels: usize,
    /// Feed the appearance encoder stacked limb crops instead of the
    /// channel-concatenated image and shape map.
    pub in_plane_normalization: bool,
    /// Side length of each limb crop (in-plane mode only).
    pub crop_size: usize,
    /// False under the no-appearance ablation: the appearance encoder is
    /// absent and the decoder sees only the shape bottleneck.
    pub use_appearance: bool,
}

impl Default for VUNetConfig {
    fn default() -> Self {
        VUNetConfig {
            image_size: 32,
            n_blocks: 3,
            z_channels: 32,
            base_width: 32,
            width_cap: 256,
            alpha: 0.2,
            shape_channels: 3,
            image_channels: 3,
            in_plane_normalization: false,
            crop_size: 8,
            use_appearance: true,
        }
    }
}

impl VUNetConfig {
    pub fn validate(&self) -> Result<()> {
        let want = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        want(
            self.image_size.is_power_of_two(),
            "image_size must be a power of two",
        )?;
        want(self.n_blocks >= 1, "n_blocks must be >= 1")?;
        want(
            self.image_size >> self.n_blocks >= 1,
            "image_size / 2^n_blocks must be >= 1",
        )?;
        want(self.z_channels >= 1, "z_channels must be >= 1")?;
        want(
            self.base_width >= 1 && self.width_cap >= self.base_width,
            "width_cap must be >= base_width >= 1",
        )?;
        want(
            self.shape_channels == 1 || self.shape_channels == 3,
            "shape_channels must be 1 (edges) or 3 (stickman)",
        )?;
        if self.in_plane_normalization {
            want(
                self.crop_size.is_power_of_two(),
                "crop_size must be a power of two",
            )?;
            want(
                self.crop_size >= self.bottleneck_size() && self.crop_size <= self.image_size,
                "crop_size must lie between the bottleneck size and image_size",
            )?;
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.n_blocks
    }

    /// Stage width at resolution level `i` (level 0 = full resolution).
    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.width_cap)
    }

    pub fn appearance_input_channels(&self) -> usize {
        if self.in_plane_normalization {
            24
        } else {
            self.image_channels + self.shape_channels
        }
    }

    pub fn appearance_input_size(&self) -> usize {
        if self.in_plane_normalization {
            self.crop_size
        } else {
            self.image_size
        }
    }

    /// Downsampling stages of the appearance encoder: enough to land at the
    /// bottleneck resolution.
    pub fn appearance_depth(&self) -> usize {
        (self.appearance_input_size() / self.bottleneck_size()).trailing_zeros() as usize
    }
}

/// Mean and log-variance maps of a diagonal Gaussian, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

/// Materialized Gaussian parameters.
#[derive(Clone, Debug)]
pub struct GaussianParams<S: Scalar> {
    pub mean: Tensor<S>,
    pub logvar: Tensor<S>,
}

impl GaussianVars {
    pub fn materialize<S: Scalar>(&self, g: &Graph<S>) -> GaussianParams<S> {
        GaussianParams {
            mean: g.value(self.mean).clone(),
            logvar: g.value(self.logvar).clone(),
        }
    }
}

/// Output of the shape encoder.
pub struct ShapeEncoding {
    /// One activation per resolution level, captured before each
    /// downsampling; `skips[i]` has spatial extent `image_size / 2^i`.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
    pub prior: GaussianVars,
}

struct EncoderTower {
    stem: WnConv,
    blocks: Vec<ResidualBlock>,
    downs: Vec<Downsample>,
    head: WnConv,
}

impl EncoderTower {
    fn new(
        prefix: &str,
        in_channels: usize,
        start_level: usize,
        depth: usize,
        cfg: &VUNetConfig,
    ) -> Self {
        let w = |l: usize| cfg.width(l);
        let n = cfg.n_blocks;
        let stem = WnConv::new(format!("{prefix}.stem"), in_channels, w(start_level), 3, 1);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for j in 0..depth {
            let level = start_level + j;
            blocks.push(ResidualBlock::new(
                &format!("{prefix}.block{j}"),
                w(level),
                w(level),
                cfg.alpha,
            ));
            downs.push(Downsample::new(
                &format!("{prefix}.down{j}"),
                w(level),
                w(level + 1),
            ));
        }
        let head = WnConv::new(format!("{prefix}.head"), w(n), 2 * cfg.z_channels, 1, 1);
        EncoderTower {
            stem,
            blocks,
            downs,
            head,
        }
    }

    fn register<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<()> {
        self.stem.register(store, rng)?;
        for (b, d) in self.blocks.iter().zip(&self.downs) {
            b.register(store, rng)?;
            d.register(store, rng)?;
        }
        self.head.register(store, rng)
    }

    /// Returns (per-stage block outputs, bottleneck, head distribution).
    fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        x: Var,
        z_channels: usize,
    ) -> Result<(Vec<Var>, Var, GaussianVars)> {
        let mut h = self.stem.apply(g, acc, x)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (block, down) in self.blocks.iter().zip(&self.downs) {
            h = block.apply(g, acc, h)?;
            taps.push(h);
            h = down.apply(g, acc, h)?;
        }
        let head_out = self.head.apply(g, acc, h)?;
        let mean = g.channel_slice(head_out, 0, z_channels)?;
        let logvar_raw = g.channel_slice(head_out, z_channels, z_channels)?;
        let logvar = g.clamp(
            logvar_raw,
            S::from_f64(-LOGVAR_CLAMP),
            S::from_f64(LOGVAR_CLAMP),
        )?;
        Ok((taps, h, GaussianVars { mean, logvar }))
    }
}

/// The generator pair (shape encoder + decoder) and the appearance encoder.
/// The generator carries `2n` residual blocks: `n` in the encoder and `n`
/// symmetric blocks in the decoder.
pub struct VUNet {
    pub cfg: VUNetConfig,
    e_theta: EncoderTower,
    f_phi: Option<EncoderTower>,
    d_ups: Vec<Upsample>,
    d_blocks: Vec<ResidualBlock>,
    d_out: WnConv,
}

impl VUNet {
    pub fn new(cfg: VUNetConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_blocks;
        let w = |l: usize| cfg.width(l);

        let e_theta = EncoderTower::new("e_theta", cfg.shape_channels, 0, n, &cfg);
        let f_phi = cfg.use_appearance.then(|| {
            EncoderTower::new(
                "f_phi",
                cfg.appearance_input_channels(),
                n - cfg.appearance_depth(),
                cfg.appearance_depth(),
                &cfg,
            )
        });

        // The first upsample consumes the bottleneck concatenation directly.
        let gamma_channels = if cfg.use_appearance {
            w(n) + cfg.z_channels
        } else {
            w(n)
        };
        let mut d_ups = Vec::new();
        let mut d_blocks = Vec::new();
        for i in (0..n).rev() {
            let in_ch = if i == n - 1 { gamma_channels } else { w(i + 1) };
            d_ups.push(Upsample::new(&format!("d_theta.up{i}"), in_ch, w(i)));
            d_blocks.push(ResidualBlock::new(
                &format!("d_theta.block{i}"),
                2 * w(i),
                w(i),
                cfg.alpha,
            ));
        }
        let d_out = WnConv::new("d_theta.out", w(0), cfg.image_channels, 1, 1);

        Ok(VUNet {
            cfg,
            e_theta,
            f_phi,
            d_ups,
            d_blocks,
            d_out,
        })
    }

    /// Register every parameter. The total count is a pure function of the
    /// config.
    pub fn register_params<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut Rng,
    ) -> Result<()> {
        self.e_theta.register(store, rng)?;
        if let Some(f) = &self.f_phi {
            f.register(store, rng)?;
        }
        for (u, b) in self.d_ups.iter().zip(&self.d_blocks) {
            u.register(store, rng)?;
            b.register(store, rng)?;
        }
        self.d_out.register(store, rng)
    }

    fn check_shape_map<S: Scalar>(&self, t: &Tensor<S>) -> Result<()> {
        let (_, c, h, w) = t.dims_nchw()?;
        if c != self.cfg.shape_channels {
            return Err(Error::ChannelMismatch(format!(
                "shape map has {} channels, config expects {}",
                c, self.cfg.shape_channels
            )));
        }
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "shape map is {}x{}, config expects {}x{}",
                h, w, self.cfg.image_size, self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Shape encoder: residual + downsampling stages with skip taps, plus
    /// the conditional-prior head at the bottleneck.
    pub fn encode_shape<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        shape_map: Var,
    ) -> Result<ShapeEncoding> {
        self.check_shape_map(g.value(shape_map))?;
        let (skips, bottleneck, prior) =
            self.e_theta.apply(g, acc, shape_map, self.cfg.z_channels)?;
        Ok(ShapeEncoding {
            skips,
            bottleneck,
            prior,
        })
    }

    /// Appearance encoder: posterior over `z` given the appearance input
    /// (image + shape channels, or the stacked limb crops in in-plane
    /// mode).
    pub fn encode_appearance<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        appearance_input: Var,
    ) -> Result<GaussianVars> {
        let f = self
            .f_phi
            .as_ref()
            .ok_or_else(|| Error::Config("appearance encoder disabled by ablation".into()))?;
        let t = g.value(appearance_input);
        let (_, c, h, w) = t.dims_nchw()?;
        if c != self.cfg.appearance_input_channels() {
            return Err(Error::ChannelMismatch(format!(
                "appearance input has {} channels, config expects {}",
                c,
                self.cfg.appearance_input_channels()
            )));
        }
        let want = self.cfg.appearance_input_size();
        if h != want || w != want {
            return Err(Error::ShapeMismatch(format!(
                "appearance input is {}x{}, config expects {}x{}",
                h, w, want, want
            )));
        }
        let (_, _, q) = f.apply(g, acc, appearance_input, self.cfg.z_channels)?;
        Ok(q)
    }

    /// `z = mean + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from
    /// `rng`. Gradients flow into mean and logvar; `eps` is a constant leaf.
    pub fn reparameterize<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        q: &GaussianVars,
        rng: &mut Rng,
    ) -> Result<Var> {
        let eps = Tensor::randn(g.value(q.mean).shape(), 1.0, rng);
        let eps = g.leaf(eps)?;
        let half_logvar = g.scale(q.logvar, S::from_f64(0.5))?;
        let std = g.exp(half_logvar)?;
        let noise = g.mul(std, eps)?;
        g.add(q.mean, noise)
    }

    /// Decoder: bottleneck concatenation, then `n` upsample + skip-concat +
    /// residual stages, then a 1x1 projection to image channels. The output
    /// is the mean of the Laplace likelihood; it is not clamped here.
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        enc: &ShapeEncoding,
        z: Option<Var>,
    ) -> Result<Var> {
        if enc.skips.len() != self.cfg.n_blocks {
            return Err(Error::ShapeMismatch(format!(
                "encoding has {} skips, decoder expects {}",
                enc.skips.len(),
                self.cfg.n_blocks
            )));
        }
        let gamma = match (self.cfg.use_appearance, z) {
            (true, Some(z)) => {
                let s = self.cfg.bottleneck_size();
                let (_, c, h, w) = g.value(z).dims_nchw()?;
                if c != self.cfg.z_channels || h != s || w != s {
                    return Err(Error::ShapeMismatch(format!(
                        "z has shape {:?}, expected [{}, {}, {}]",
                        g.value(z).shape(),
                        self.cfg.z_channels,
                        s,
                        s
                    )));
                }
                g.concat_channels(&[enc.bottleneck, z])?
            }
            (false, None) => enc.bottleneck,
            (true, None) => return Err(Error::Config("model expects an appearance code z".into())),
            (false, Some(_)) => {
                return Err(Error::Config(
                    "no-appearance model cannot consume a z code".into(),
                ))
            }
        };
        let mut h = gamma;
        for (stage, (up, block)) in self.d_ups.iter().zip(&self.d_blocks).enumerate() {
            let level = self.cfg.n_blocks - 1 - stage;
            h = up.apply(g, acc, h)?;
            let skip = enc.skips[level];
            let cat = g.concat_channels(&[h, skip])?;
            h = block.apply(g, acc, cat)?;
        }
        self.d_out.apply(g, acc, h)
    }
}

/// Everything the training loss needs from one forward pass.
pub struct TrainForward {
    pub xbar: Var,
    /// Posterior `q(z | x, shape)`; absent under the no-appearance ablation.
    pub q: Option<GaussianVars>,
    /// Conditional prior `p(z | shape)`.
    pub p: GaussianVars,
}

impl VUNet {
    /// Training-time forward: posterior from the appearance input, one
    /// reparameterized sample, decode against the shape encoding.
    pub fn forward_train<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        shape_map: Var,
        appearance_input: Option<Var>,
        rng: &mut Rng,
    ) -> Result<TrainForward> {
        if self.cfg.use_appearance {
            let app = appearance_input
                .ok_or_else(|| Error::Config("appearance input required".into()))?;
            let q = self.encode_appearance(g, acc, app)?;
            let enc = self.encode_shape(g, acc, shape_map)?;
            let z = self.reparameterize(g, &q, rng)?;
            let xbar = self.decode(g, acc, &enc, Some(z))?;
            Ok(TrainForward {
                xbar,
                q: Some(q),
                p: enc.prior,
            })
        } else {
            let enc = self.encode_shape(g, acc, shape_map)?;
            let xbar = self.decode(g, acc, &enc, None)?;
            Ok(TrainForward {
                xbar,
                q: None,
                p: enc.prior,
            })
        }
    }

    /// Generation from the learned conditional prior: `z ~ p(z | shape)`.
    pub fn forward_sample<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        shape_map: Var,
        rng: &mut Rng,
    ) -> Result<Var> {
        let enc = self.encode_shape(g, acc, shape_map)?;
        if !self.cfg.use_appearance {
            return self.decode(g, acc, &enc, None);
        }
        let z = self.reparameterize(g, &enc.prior, rng)?;
        self.decode(g, acc, &enc, Some(z))
    }

    /// Deterministic transfer: the posterior mean from the appearance
    /// source drives decoding against an arbitrary target shape.
    pub fn forward_transfer<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        acc: &mut Access<S>,
        appearance_input: Var,
        target_shape_map: Var,
    ) -> Result<Var> {
        let q = self.encode_appearance(g, acc, appearance_input)?;
        let enc = self.encode_shape(g, acc, target_shape_map)?;
        self.decode(g, acc, &enc, Some(q.mean))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> VUNetConfig {
        VUNetConfig {
            image_size: 16,
            n_blocks: 2,
            z_channels: 4,
            base_width: 4,
            width_cap: 8,
            ..VUNetConfig::default()
        }
    }

    fn build<S: Scalar>(cfg: VUNetConfig, seed: u64) -> (VUNet, ParamStore<S>) {
        let model = VUNet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, "init.params");
        model.register_params(&mut store, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn skip_and_bottleneck_sizes() {
        // image 32, n = 3: skips at 32, 16, 8; bottleneck at 4.
        let cfg = VUNetConfig {
            image_size: 32,
            n_blocks: 3,
            z_channels: 4,
            base_width: 4,
            width_cap: 8,
            ..VUNetConfig::default()
        };
        let (model, store) = build::<f32>(cfg, 1);
        let mut g = Graph::new();
        let y = g.leaf(Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        let mut acc = Access::Read(&store);
        let enc = model.encode_shape(&mut g, &mut acc, y).unwrap();
        let sizes: Vec<usize> = enc.skips.iter().map(|&s| g.value(s).shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8]);
        assert_eq!(g.value(enc.bottleneck).shape()[2], 4);
        assert_eq!(g.value(enc.prior.mean).shape(), &[1, 4, 4, 4]);
        // All-zero input must still give finite outputs (graph ops would
        // have errored otherwise).
        assert!(g.value(enc.bottleneck).all_finite());
    }

    #[test]
    fn forward_train_shape_law_and_determinism() {
        let (model, store) = build::<f32>(tiny_cfg(), 2);
        let mut rng = Rng::derive(3, "data");
        let x = Tensor::randn(&[2, 3, 16, 16], 0.5, &mut rng);
        let y = Tensor::randn(&[2, 3, 16, 16], 0.5, &mut rng);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let yv = g.leaf(y.clone()).unwrap();
            let app = g.concat_channels(&[xv, yv]).unwrap();
            let mut acc = Access::Read(&store);
            let mut rng = Rng::derive(seed, "eps");
            let out = model
                .forward_train(&mut g, &mut acc, yv, Some(app), &mut rng)
                .unwrap();
            g.value(out.xbar).clone()
        };
        let a = run(7);
        assert_eq!(a.shape(), x.shape());
        // Same seed: bitwise identical. Different seed: different sample.
        assert!(a.bit_eq(&run(7)));
        assert!(!a.bit_eq(&run(8)));
    }

    #[test]
    fn reparameterize_with_tiny_variance_returns_mean() {
        let (model, store) = build::<f32>(tiny_cfg(), 4);
        let _ = store;
        let mut g = Graph::new();
        let mean = g.leaf(Tensor::full(&[1, 4, 4, 4], 1.5f32)).unwrap();
        let logvar_raw = g.leaf(Tensor::full(&[1, 4, 4, 4], -1e9f32)).unwrap();
        let logvar = g.clamp(logvar_raw, -10.0, 10.0).unwrap();
        let q = GaussianVars { mean, logvar };
        let mut rng = Rng::derive(5, "eps");
        let z = model.reparameterize(&mut g, &q, &mut rng).unwrap();
        for &v in g.value(z).data() {
            assert!((v - 1.5).abs() < 1e-2 * 1.5 + 1e-2);
        }
    }

    #[test]
    fn reparameterize_gradient_wrt_mean_is_identity() {
        // With eps fixed, d z / d mean is the identity, so the gradient of
        // sum(z) w.r.t. the mean map is all ones exactly.
        let (model, _store) = build::<f64>(tiny_cfg(), 20);
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::derive(21, "mean");
        let mean_t = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let mean = g.param("mean", &mean_t).unwrap();
        let logvar = g.leaf(Tensor::randn(&[1, 4, 4, 4], 0.5, &mut rng)).unwrap();
        let q = GaussianVars { mean, logvar };
        let mut eps_rng = Rng::derive(22, "eps");
        let z = model.reparameterize(&mut g, &q, &mut eps_rng).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("mean").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reparameterize_sample_mean_approaches_mean_map() {
        // Monte-Carlo check: the sample mean over many draws approaches the
        // mean map within four standard errors.
        let (model, _store) = build::<f32>(tiny_cfg(), 6);
        let mean_val = 0.7f32;
        let logvar_val = -0.4f32;
        let draws = 10_000;
        let mut acc_sum = 0.0f64;
        let mut rng = Rng::derive(9, "mc");
        for _ in 0..draws {
            let mut g = Graph::new();
            let mean = g.leaf(Tensor::full(&[1, 1, 1, 1], mean_val)).unwrap();
            let logvar = g.leaf(Tensor::full(&[1, 1, 1, 1], logvar_val)).unwrap();
            let q = GaussianVars { mean, logvar };
            let z = model.reparameterize(&mut g, &q, &mut rng).unwrap();
            acc_sum += g.value(z).data()[0] as f64;
        }
        let sample_mean = acc_sum / draws as f64;
        let std = ((logvar_val as f64) / 2.0).exp();
        let se = std / (draws as f64).sqrt();
        assert!(
            (sample_mean - mean_val as f64).abs() < 4.0 * se,
            "sample mean {sample_mean} vs {mean_val} (se {se})"
        );
    }

    #[test]
    fn decode_output_matches_image_shape_across_configs() {
        for (size, n) in [(16usize, 2usize), (32, 3), (64, 4)] {
            let cfg = VUNetConfig {
                image_size: size,
                n_blocks: n,
                z_channels: 2,
                base_width: 2,
                width_cap: 4,
                ..VUNetConfig::default()
            };
            let (model, store) = build::<f32>(cfg, 10 + n as u64);
            let mut g = Graph::new();
            let y = g.leaf(Tensor::zeros(&[1, 3, size, size])).unwrap();
            let mut acc = Access::Read(&store);
            let mut rng = Rng::derive(1, "eps");
            let out = model.forward_sample(&mut g, &mut acc, y, &mut rng).unwrap();
            assert_eq!(g.value(out).shape(), &[1, 3, size, size]);
        }
    }

    #[test]
    fn no_appearance_model_has_no_f_phi_and_ignores_x() {
        let cfg = VUNetConfig {
            use_appearance: false,
            ..tiny_cfg()
        };
        let (model, store) = build::<f32>(cfg, 11);
        assert!(store.iter().all(|p| !p.name.starts_with("f_phi.")));
        let mut rng = Rng::derive(12, "data");
        let y = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let yv = g.leaf(y.clone()).unwrap();
            let mut acc = Access::Read(&store);
            let mut rng = Rng::derive(0, "eps");
            let out = model
                .forward_train(&mut g, &mut acc, yv, None, &mut rng)
                .unwrap();
            assert!(out.q.is_none());
            g.value(out.xbar).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn in_plane_mode_accepts_crop_stack_and_rejects_plain() {
        let cfg = VUNetConfig {
            in_plane_normalization: true,
            crop_size: 8,
            ..tiny_cfg()
        };
        let (model, store) = build::<f32>(cfg, 13);
        let mut g = Graph::new();
        // All-black crop stack (every limb missing) still yields finite
        // Gaussian parameters.
        let crops = g.leaf(Tensor::zeros(&[1, 24, 8, 8])).unwrap();
        let mut acc = Access::Read(&store);
        let q = model.encode_appearance(&mut g, &mut acc, crops).unwrap();
        assert!(g.value(q.mean).all_finite());
        assert!(g.value(q.logvar).all_finite());
        assert_eq!(g.value(q.mean).shape(), &[1, 4, 4, 4]);

        let plain = g.leaf(Tensor::zeros(&[1, 6, 16, 16])).unwrap();
        assert!(model.encode_appearance(&mut g, &mut acc, plain).is_err());
    }

    #[test]
    fn transfer_to_self_is_posterior_mean_reconstruction() {
        let (model, store) = build::<f32>(tiny_cfg(), 14);
        let mut rng = Rng::derive(15, "data");
        let x = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng);
        let y = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng);

        let transfer = {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let yv = g.leaf(y.clone()).unwrap();
            let app = g.concat_channels(&[xv, yv]).unwrap();
            let mut acc = Access::Read(&store);
            let out = model.forward_transfer(&mut g, &mut acc, app, yv).unwrap();
            g.value(out).clone()
        };
        // Reconstruction with the posterior mean, spelled out.
        let recon = {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let yv = g.leaf(y.clone()).unwrap();
            let app = g.concat_channels(&[xv, yv]).unwrap();
            let mut acc = Access::Read(&store);
            let q = model.encode_appearance(&mut g, &mut acc, app).unwrap();
            let enc = model.encode_shape(&mut g, &mut acc, yv).unwrap();
            let out = model.decode(&mut g, &mut acc, &enc, Some(q.mean)).unwrap();
            g.value(out).clone()
        };
        assert!(transfer.bit_eq(&recon));
    }

    #[test]
    fn all_black_appearance_source_is_tolerated() {
        let (model, store) = build::<f32>(tiny_cfg(), 16);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let mut rng = Rng::derive(17, "y");
        let y = g
            .leaf(Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng))
            .unwrap();
        let app = g.concat_channels(&[x, y]).unwrap();
        let mut acc = Access::Read(&store);
        let out = model.forward_transfer(&mut g, &mut acc, app, y).unwrap();
        assert!(g.value(out).all_finite());
    }

    #[test]
    fn param_count_is_a_pure_function_of_config() {
        let (_, s1) = build::<f32>(tiny_cfg(), 1);
        let (_, s2) = build::<f32>(tiny_cfg(), 999);
        assert_eq!(s1.total_values(), s2.total_values());
        let names1: Vec<String> = s1.iter().map(|p| p.name.clone()).collect();
        let names2: Vec<String> = s2.iter().map(|p| p.name.clone()).collect();
        assert_eq!(names1, names2);
    }
}
