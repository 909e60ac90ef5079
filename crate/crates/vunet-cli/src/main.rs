//! `vunet` command-line interface.
//!
//! Subcommands map onto the library's experiment surface: dataset
//! synthesis, training (with ablation switches in the config), posterior-
//! mean reconstruction, appearance sampling from the learned prior,
//! shape/appearance transfer, quantitative evaluation and the gradient
//! verification suites.
//!
//! Every failure prints a single machine-parsable line
//! `error: <CODE>: <detail>` and exits nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use vunet::config::Config;
use vunet::error::Error;
use vunet::eval;
use vunet::rng::{stable_hash, Rng};
use vunet::shapeio::{load_ppm, parse_keypoints, render_stickman, save_ppm, stickman_palette};
use vunet::synthglyph::{generate_dataset, load_factors};
use vunet::tensor::Tensor;
use vunet::trainer::{load_dataset, train, ModelCtx, Sample};

const USAGE: &str = "\
usage: vunet <command> [options]

commands:
  synth       --out DIR --n N [--seed S] [--config FILE] [--set k=v]...
  train       --config FILE --out DIR [--seed S] [--set k=v]...
  reconstruct --ckpt FILE --manifest FILE --out DIR
  sample      --ckpt FILE --keypoints FILE --seed S --count K --out DIR
  transfer    --ckpt FILE --app-image FILE --app-keypoints FILE
              --target-keypoints FILE --out DIR
  eval        --ckpt FILE --manifest FILE --out FILE
  gradcheck   [--scope all|ops|blocks|model]

Option precedence: command-line flags override `--set section.key=value`
overrides, which override the config file, which overrides the defaults.
";

fn error_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::Parse { .. } => ("CONFIG_PARSE", 2),
        Error::Checkpoint(_) => ("CKPT_CORRUPT", 3),
        Error::Data(_) | Error::Io(_) | Error::DegenerateBatch(_) => ("DATA_MISSING", 4),
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } | Error::Numeric(_) => {
            ("NONFINITE_LOSS", 5)
        }
        Error::ShapeMismatch(_) | Error::ChannelMismatch(_) | Error::NotScalar(_) => {
            ("SHAPE_MISMATCH", 6)
        }
    }
}

fn fail(e: Error) -> ExitCode {
    let (code, exit) = error_code(&e);
    eprintln!("error: {code}: {e}");
    ExitCode::from(exit)
}

fn usage_error(detail: &str) -> Error {
    Error::Config(format!("{detail} (run `vunet` for usage)"))
}

/// Minimal flag parser: every option is `--name value`; `--set` repeats.
struct Args {
    flags: Vec<(String, String)>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Args, Error> {
        let mut flags = Vec::new();
        let mut it = argv.iter();
        while let Some(a) = it.next() {
            let name = a
                .strip_prefix("--")
                .ok_or_else(|| usage_error(&format!("unexpected argument `{a}`")))?;
            let value = it
                .next()
                .ok_or_else(|| usage_error(&format!("flag --{name} needs a value")))?;
            flags.push((name.to_string(), value.clone()));
        }
        Ok(Args { flags })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, Error> {
        self.get(name)
            .ok_or_else(|| usage_error(&format!("missing required flag --{name}")))
    }

    fn sets(&self) -> impl Iterator<Item = &str> {
        self.flags
            .iter()
            .filter(|(n, _)| n == "set")
            .map(|(_, v)| v.as_str())
    }

    fn known(&self, allowed: &[&str]) -> Result<(), Error> {
        for (n, _) in &self.flags {
            if !allowed.contains(&n.as_str()) {
                return Err(usage_error(&format!("unknown flag --{n}")));
            }
        }
        Ok(())
    }
}

/// Assemble the effective config: file, then `--set` overrides, then
/// dedicated flags.
fn load_config(args: &Args) -> Result<Config, Error> {
    let mut cfg = match args.get("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("cannot read {path}: {e}")))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    for kv in args.sets() {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| usage_error(&format!("--set expects section.key=value, got `{kv}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.get("seed") {
        cfg.set("train.seed", seed)?;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn parse_count(s: &str, what: &str) -> Result<usize, Error> {
    s.parse::<usize>()
        .map_err(|_| usage_error(&format!("bad {what} `{s}`")))
}

fn cmd_synth(args: &Args) -> Result<(), Error> {
    args.known(&["out", "n", "seed", "config", "set"])?;
    let cfg = load_config(args)?;
    let out = PathBuf::from(args.require("out")?);
    let n = parse_count(args.require("n")?, "sample count")?;
    let manifest = generate_dataset(n, cfg.model.image_size, cfg.train.seed, &out)?;
    println!("wrote {n} samples; manifest at {}", manifest.display());
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), Error> {
    args.known(&["config", "out", "seed", "set"])?;
    let cfg = load_config(args)?;
    let out = PathBuf::from(args.require("out")?);
    let outcome = train(&cfg, &out)?;
    if let Some(last) = &outcome.last_report {
        println!(
            "trained {} steps; final total {:.6}",
            cfg.train.total_steps, last.total
        );
    }
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    println!("metrics: {}", outcome.metrics_path.display());
    Ok(())
}

/// Load a model context and repoint its manifest when the command supplies
/// one.
fn context_for(ckpt: &str, manifest: Option<&str>) -> Result<ModelCtx, Error> {
    let (mut ctx, _) = ModelCtx::from_checkpoint(Path::new(ckpt))?;
    if let Some(m) = manifest {
        ctx.config.data.manifest = PathBuf::from(m);
    }
    Ok(ctx)
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn cmd_reconstruct(args: &Args) -> Result<(), Error> {
    args.known(&["ckpt", "manifest", "out"])?;
    let ctx = context_for(args.require("ckpt")?, Some(args.require("manifest")?))?;
    let out = PathBuf::from(args.require("out")?);
    std::fs::create_dir_all(&out)?;
    let ds = load_dataset(&ctx.config)?;
    let mut count = 0usize;
    for s in ds.train.iter().chain(ds.val.iter()) {
        let recon = clamp01(&ctx.reconstruct(s)?);
        save_ppm(&out.join(format!("recon_{}.ppm", s.id)), &recon)?;
        count += 1;
    }
    println!("wrote {count} reconstructions to {}", out.display());
    Ok(())
}

/// Stickman shape maps for every record of a keypoint file.
fn shape_maps_from_file(
    ctx: &ModelCtx,
    path: &str,
) -> Result<Vec<(String, vunet::shapeio::KeypointSet, Tensor<f32>)>, Error> {
    if ctx.config.model.shape_channels != 3 {
        return Err(Error::Data(
            "keypoint-driven commands need a stickman-profile model (shape_channels = 3)".into(),
        ));
    }
    let palette = stickman_palette();
    let size = ctx.config.model.image_size;
    Ok(parse_keypoints(Path::new(path))?
        .into_iter()
        .map(|(id, k)| {
            let map = render_stickman(&k, size, &palette);
            (id, k, map)
        })
        .collect())
}

fn cmd_sample(args: &Args) -> Result<(), Error> {
    args.known(&["ckpt", "keypoints", "seed", "count", "out"])?;
    let ctx = context_for(args.require("ckpt")?, None)?;
    let seed: u64 = args
        .require("seed")?
        .parse()
        .map_err(|_| usage_error("bad --seed"))?;
    let count = parse_count(args.require("count")?, "sample count")?;
    let out = PathBuf::from(args.require("out")?);
    std::fs::create_dir_all(&out)?;
    let shapes = shape_maps_from_file(&ctx, args.require("keypoints")?)?;
    let mut written = 0usize;
    for (id, _, map) in &shapes {
        for k in 0..count {
            let mut rng = Rng::from_seed(stable_hash(seed, &format!("cli.sample.{id}.{k}")));
            let img = clamp01(&ctx.sample_prior(map, &mut rng)?);
            save_ppm(&out.join(format!("sample_{id}_{k:02}.ppm")), &img)?;
            written += 1;
        }
    }
    println!("wrote {written} samples to {}", out.display());
    Ok(())
}

fn cmd_transfer(args: &Args) -> Result<(), Error> {
    args.known(&[
        "ckpt",
        "app-image",
        "app-keypoints",
        "target-keypoints",
        "out",
    ])?;
    let ctx = context_for(args.require("ckpt")?, None)?;
    let out = PathBuf::from(args.require("out")?);
    std::fs::create_dir_all(&out)?;

    let image = load_ppm(Path::new(args.require("app-image")?))?;
    let size = ctx.config.model.image_size;
    if image.shape() != [3, size, size] {
        return Err(Error::ShapeMismatch(format!(
            "appearance image is {:?}, model expects [3, {size}, {size}]",
            image.shape()
        )));
    }
    let mut app_shapes = shape_maps_from_file(&ctx, args.require("app-keypoints")?)?;
    if app_shapes.is_empty() {
        return Err(Error::Data("appearance keypoint file is empty".into()));
    }
    let (app_id, app_k, app_map) = app_shapes.remove(0);
    let source = Sample {
        id: app_id,
        image,
        keypoints: Some(app_k),
        shape_map: app_map,
    };

    let targets = shape_maps_from_file(&ctx, args.require("target-keypoints")?)?;
    if targets.is_empty() {
        return Err(Error::Data("target keypoint file is empty".into()));
    }
    for (tid, _, tmap) in &targets {
        let img = clamp01(&ctx.transfer(&source, tmap)?);
        save_ppm(&out.join(format!("transfer_{tid}.ppm")), &img)?;
    }
    println!("wrote {} transfers to {}", targets.len(), out.display());
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<(), Error> {
    args.known(&["ckpt", "manifest", "out"])?;
    let ckpt = args.require("ckpt")?;
    let ctx = context_for(ckpt, Some(args.require("manifest")?))?;
    let ds = load_dataset(&ctx.config)?;
    let factors_path = ctx
        .config
        .data
        .manifest
        .parent()
        .unwrap_or(Path::new(""))
        .join("factors.tsv");
    let factors = factors_path
        .is_file()
        .then(|| load_factors(&factors_path))
        .transpose()?;
    let report = eval::evaluate(&ctx, &ds, factors.as_deref(), ctx.config.train.seed)?;
    let text = report.to_text();
    let out = PathBuf::from(args.require("out")?);
    std::fs::write(&out, &text)?;
    // Mirror the report into the training log when one sits next to the
    // checkpoint.
    if let Some(dir) = Path::new(ckpt).parent() {
        let log = dir.join("metrics.log");
        if log.is_file() {
            use std::io::Write as _;
            let mut f = std::fs::OpenOptions::new().append(true).open(&log)?;
            for line in text.lines() {
                writeln!(f, "eval: {line}")?;
            }
        }
    }
    print!("{text}");
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<(), Error> {
    args.known(&["scope"])?;
    let scope = args.get("scope").unwrap_or("all");
    let mut results = Vec::new();
    if matches!(scope, "all" | "ops") {
        results.extend(vunet::gradcheck::suites::ops()?);
    }
    if matches!(scope, "all" | "blocks") {
        results.extend(vunet::gradcheck::suites::blocks()?);
    }
    if matches!(scope, "all" | "model") {
        results.extend(vunet::gradcheck::suites::model()?);
    }
    if results.is_empty() {
        return Err(usage_error(&format!(
            "unknown scope `{scope}` (all|ops|blocks|model)"
        )));
    }
    let mut worst: f64 = 0.0;
    for (name, err) in &results {
        println!("{name}: max_rel_error = {err:.3e}");
        worst = worst.max(*err);
    }
    if worst >= 1e-6 {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= 1e-6"
        )));
    }
    println!("all {} checks < 1e-6", results.len());
    Ok(())
}

fn run() -> Result<(), Error> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some((cmd, rest)) = argv.split_first() else {
        print!("{USAGE}");
        return Err(usage_error("no command given"));
    };
    let args = Args::parse(rest)?;
    match cmd.as_str() {
        "synth" => cmd_synth(&args),
        "train" => cmd_train(&args),
        "reconstruct" => cmd_reconstruct(&args),
        "sample" => cmd_sample(&args),
        "transfer" => cmd_transfer(&args),
        "eval" => cmd_eval(&args),
        "gradcheck" => cmd_gradcheck(&args),
        other => {
            print!("{USAGE}");
            Err(usage_error(&format!("unknown command `{other}`")))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
