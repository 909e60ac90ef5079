//! Experiment configuration.
//!
//! Text format: `[section]` headers, `key = value` lines, `#` comments.
//! Sections are `[model]`, `[train]`, `[data]`, `[eval]`. Every key has a
//! documented default; unknown sections or keys are hard errors so typos
//! cannot silently fall back to defaults. Values set on the command line
//! override the file, which overrides the defaults.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::VUNetConfig;
use crate::objective::ReconMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoKl,
    NoAppearance,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoKl => "no_kl",
            Ablation::NoAppearance => "no_appearance",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSection {
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub mode: ReconMode,
    pub kl_weight: f64,
    /// Global-norm gradient clip; `none` disables it.
    pub grad_clip: Option<f64>,
    pub base_lr: f64,
}

#[derive(Clone, Debug)]
pub struct DataSection {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug)]
pub struct EvalSection {
    /// Transfer pairs evaluated by the transfer-error metric.
    pub transfer_pairs: usize,
    /// Appearance-consistency groups and images per group.
    pub groups: usize,
    pub group_size: usize,
    /// Cap on reconstruction/pose evaluation samples.
    pub max_samples: usize,
}

/// Full experiment configuration (model + train + data + eval).
#[derive(Clone, Debug)]
pub struct Config {
    pub model: VUNetConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: VUNetConfig::default(),
            train: TrainSection {
                batch_size: 16,
                total_steps: 10_000,
                seed: 1,
                ablation: Ablation::Full,
                checkpoint_every: 2_000,
                eval_every: 1_000,
                mode: ReconMode::Perceptual,
                kl_weight: 1.0,
                grad_clip: Some(100.0),
                base_lr: 0.001,
            },
            data: DataSection {
                manifest: PathBuf::from("data/manifest.tsv"),
            },
            eval: EvalSection {
                transfer_pairs: 200,
                groups: 8,
                group_size: 8,
                max_samples: 64,
            },
        }
    }
}

impl Config {
    /// Parse config text over the defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                if !matches!(section.as_str(), "model" | "train" | "data" | "eval") {
                    return Err(Error::Config(format!(
                        "line {line_no}: unknown section `[{section}]`"
                    )));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {line_no}: key `{key}` outside any section"
                )));
            }
            cfg.set(&format!("{section}.{key}"), value)
                .map_err(|e| Error::Config(format!("line {line_no}: {e}")))?;
        }
        cfg.model.use_appearance = cfg.train.ablation != Ablation::NoAppearance;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Set one dotted key, e.g. `train.seed = 7`. Used by both the file
    /// parser and command-line overrides.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let bad_value = |what: &str| Error::Config(format!("bad {what} `{value}` for `{dotted}`"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad_value("integer"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad_value("number"));
        let parse_bool = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(bad_value("boolean")),
        };
        match dotted {
            "model.image_size" => self.model.image_size = parse_usize(value)?,
            "model.n_blocks" => self.model.n_blocks = parse_usize(value)?,
            "model.z_channels" => self.model.z_channels = parse_usize(value)?,
            "model.base_width" => self.model.base_width = parse_usize(value)?,
            "model.width_cap" => self.model.width_cap = parse_usize(value)?,
            "model.alpha" => self.model.alpha = parse_f64(value)?,
            "model.shape_channels" => self.model.shape_channels = parse_usize(value)?,
            "model.in_plane_normalization" => {
                self.model.in_plane_normalization = parse_bool(value)?
            }
            "model.crop_size" => self.model.crop_size = parse_usize(value)?,
            "train.batch_size" => self.train.batch_size = parse_usize(value)?,
            "train.total_steps" => self.train.total_steps = parse_usize(value)?,
            "train.seed" => {
                self.train.seed = value.parse::<u64>().map_err(|_| bad_value("seed"))?
            }
            "train.ablation" => {
                self.train.ablation = match value {
                    "full" => Ablation::Full,
                    "no_kl" => Ablation::NoKl,
                    "no_appearance" => Ablation::NoAppearance,
                    _ => return Err(bad_value("ablation (full|no_kl|no_appearance)")),
                };
                self.model.use_appearance = self.train.ablation != Ablation::NoAppearance;
            }
            "train.checkpoint_every" => self.train.checkpoint_every = parse_usize(value)?,
            "train.eval_every" => self.train.eval_every = parse_usize(value)?,
            "train.mode" => {
                self.train.mode = match value {
                    "perceptual" => ReconMode::Perceptual,
                    "l1" => ReconMode::L1,
                    _ => return Err(bad_value("mode (perceptual|l1)")),
                }
            }
            "train.kl_weight" => self.train.kl_weight = parse_f64(value)?,
            "train.grad_clip" => {
                self.train.grad_clip = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "train.base_lr" => self.train.base_lr = parse_f64(value)?,
            "data.manifest" => self.data.manifest = PathBuf::from(value),
            "eval.transfer_pairs" => self.eval.transfer_pairs = parse_usize(value)?,
            "eval.groups" => self.eval.groups = parse_usize(value)?,
            "eval.group_size" => self.eval.group_size = parse_usize(value)?,
            "eval.max_samples" => self.eval.max_samples = parse_usize(value)?,
            _ => return Err(Error::Config(format!("unknown key `{dotted}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let grad_clip = match self.train.grad_clip {
            Some(c) => format!("{c:?}"),
            None => "none".to_string(),
        };
        format!(
            "[model]\n\
             image_size = {}\n\
             n_blocks = {}\n\
             z_channels = {}\n\
             base_width = {}\n\
             width_cap = {}\n\
             alpha = {:?}\n\
             shape_channels = {}\n\
             in_plane_normalization = {}\n\
             crop_size = {}\n\
             \n[train]\n\
             batch_size = {}\n\
             total_steps = {}\n\
             seed = {}\n\
             ablation = {}\n\
             checkpoint_every = {}\n\
             eval_every = {}\n\
             mode = {}\n\
             kl_weight = {:?}\n\
             grad_clip = {}\n\
             base_lr = {:?}\n\
             \n[data]\n\
             manifest = {}\n\
             \n[eval]\n\
             transfer_pairs = {}\n\
             groups = {}\n\
             group_size = {}\n\
             max_samples = {}\n",
            self.model.image_size,
            self.model.n_blocks,
            self.model.z_channels,
            self.model.base_width,
            self.model.width_cap,
            self.model.alpha,
            self.model.shape_channels,
            self.model.in_plane_normalization,
            self.model.crop_size,
            self.train.batch_size,
            self.train.total_steps,
            self.train.seed,
            self.train.ablation.as_str(),
            self.train.checkpoint_every,
            self.train.eval_every,
            match self.train.mode {
                ReconMode::Perceptual => "perceptual",
                ReconMode::L1 => "l1",
            },
            self.train.kl_weight,
            grad_clip,
            self.train.base_lr,
            self.data.manifest.display(),
            self.eval.transfer_pairs,
            self.eval.groups,
            self.eval.group_size,
            self.eval.max_samples,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        let text = cfg.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "\
# experiment
[model]
image_size = 16  # small
n_blocks = 2

[train]
seed = 42
ablation = no_kl
grad_clip = none
";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.model.image_size, 16);
        assert_eq!(cfg.model.n_blocks, 2);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.ablation, Ablation::NoKl);
        assert_eq!(cfg.train.grad_clip, None);
        assert!(cfg.model.use_appearance);
    }

    #[test]
    fn no_appearance_disables_the_appearance_encoder() {
        let cfg = Config::parse("[train]\nablation = no_appearance\n").unwrap();
        assert!(!cfg.model.use_appearance);
    }

    #[test]
    fn unknown_keys_and_sections_are_hard_errors() {
        assert!(Config::parse("[model]\nimage_sz = 32\n").is_err());
        assert!(Config::parse("[mdl]\nimage_size = 32\n").is_err());
        assert!(Config::parse("image_size = 32\n").is_err());
        assert!(Config::parse("[model]\nimage_size 32\n").is_err());
    }

    #[test]
    fn fuzzed_unknown_keys_never_parse() {
        let mut rng = crate::rng::Rng::derive(3, "fuzz");
        let known = [
            "image_size",
            "n_blocks",
            "z_channels",
            "base_width",
            "width_cap",
            "alpha",
            "shape_channels",
            "in_plane_normalization",
            "crop_size",
        ];
        for _ in 0..200 {
            let len = 1 + rng.below(10);
            let key: String = (0..len)
                .map(|_| (b'a' + rng.below(26) as u8) as char)
                .collect();
            if known.contains(&key.as_str()) {
                continue;
            }
            let text = format!("[model]\n{key} = 1\n");
            assert!(Config::parse(&text).is_err(), "accepted `{key}`");
        }
    }
}
