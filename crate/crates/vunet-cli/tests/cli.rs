//! End-to-end command tests against the compiled binary: artifact
//! round-trips, bitwise reproducibility of every command, the ablation
//! contract on checkpoints, and the machine-parsable error codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vunet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tmp(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("vunet_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

/// Small but real training setup shared by the command tests.
fn write_config(dir: &Path, manifest: &Path, steps: usize, ablation: &str) -> PathBuf {
    let text = format!(
        "[model]\nimage_size = 16\nn_blocks = 2\nz_channels = 8\nbase_width = 8\nwidth_cap = 16\n\
         [train]\nbatch_size = 8\ntotal_steps = {steps}\nseed = 11\nablation = {ablation}\n\
         checkpoint_every = 0\neval_every = 0\n\
         [data]\nmanifest = {}\n",
        manifest.display()
    );
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--seed",
        "11",
        "--set",
        "model.image_size=16",
    ]);
    assert_ok(&out);
    dir.join("manifest.tsv")
}

#[test]
fn synth_is_bitwise_reproducible() {
    let a = tmp("synth_a");
    let b = tmp("synth_b");
    synth(&a, 12);
    synth(&b, 12);
    for rel in ["manifest.tsv", "factors.tsv", "images/g00005.ppm"] {
        assert_eq!(
            fs::read(a.join(rel)).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{rel} differs between identical synth runs"
        );
    }
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 12);
    let _ = fs::remove_dir_all(&a);
    let _ = fs::remove_dir_all(&b);
}

#[test]
fn train_reconstruct_transfer_commands_compose() {
    let dir = tmp("flow");
    let manifest = synth(&dir, 24);
    let cfg = write_config(&dir, &manifest, 12, "full");

    let run_dir = dir.join("run");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let ckpt = run_dir.join("final.vun");
    assert!(ckpt.is_file());
    assert!(run_dir.join("metrics.log").is_file());

    // Reconstruct everything in the manifest.
    let rec_dir = dir.join("recon");
    assert_ok(&run(&[
        "reconstruct",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        rec_dir.to_str().unwrap(),
    ]));
    assert_eq!(fs::read_dir(&rec_dir).unwrap().count(), 24);

    // Transfer with target == appearance-source keypoints must equal the
    // reconstruction of that sample bitwise.
    let id = "g00003";
    let manifest_text = fs::read_to_string(&manifest).unwrap();
    let record = manifest_text
        .lines()
        .find(|l| l.contains(&format!("\t{id} ")))
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap();
    let kp_path = dir.join("kp.txt");
    fs::write(&kp_path, format!("{record}\n")).unwrap();
    let tr_dir = dir.join("transfer");
    assert_ok(&run(&[
        "transfer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--app-image",
        dir.join(format!("images/{id}.ppm")).to_str().unwrap(),
        "--app-keypoints",
        kp_path.to_str().unwrap(),
        "--target-keypoints",
        kp_path.to_str().unwrap(),
        "--out",
        tr_dir.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(tr_dir.join(format!("transfer_{id}.ppm"))).unwrap(),
        fs::read(rec_dir.join(format!("recon_{id}.ppm"))).unwrap(),
        "transfer-to-self differs from reconstruction"
    );

    // Reconstruct is idempotent on its outputs.
    let rec2 = dir.join("recon2");
    assert_ok(&run(&[
        "reconstruct",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        rec2.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(rec_dir.join(format!("recon_{id}.ppm"))).unwrap(),
        fs::read(rec2.join(format!("recon_{id}.ppm"))).unwrap()
    );
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn train_is_bitwise_reproducible_across_runs() {
    let dir = tmp("repro");
    let manifest = synth(&dir, 24);
    let cfg = write_config(&dir, &manifest, 8, "full");
    for name in ["a", "b"] {
        assert_ok(&run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(name).to_str().unwrap(),
        ]));
    }
    assert_eq!(
        fs::read(dir.join("a/metrics.log")).unwrap(),
        fs::read(dir.join("b/metrics.log")).unwrap()
    );
    assert_eq!(
        fs::read(dir.join("a/final.vun")).unwrap(),
        fs::read(dir.join("b/final.vun")).unwrap()
    );
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn sampling_is_seeded_and_diverse_in_seed() {
    let dir = tmp("sample");
    let manifest = synth(&dir, 24);
    let cfg = write_config(&dir, &manifest, 8, "full");
    let run_dir = dir.join("run");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let ckpt = run_dir.join("final.vun");

    let record = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .find(|l| l.contains("\tg00002 "))
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap()
        .to_string();
    let kp = dir.join("kp.txt");
    fs::write(&kp, format!("{record}\n")).unwrap();

    let mk = |seed: &str, out: &Path| {
        assert_ok(&run(&[
            "sample",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--keypoints",
            kp.to_str().unwrap(),
            "--seed",
            seed,
            "--count",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]));
    };
    let s1 = dir.join("s1");
    let s1b = dir.join("s1b");
    let s2 = dir.join("s2");
    mk("5", &s1);
    mk("5", &s1b);
    mk("6", &s2);
    let f = "sample_g00002_00.ppm";
    assert_eq!(
        fs::read(s1.join(f)).unwrap(),
        fs::read(s1b.join(f)).unwrap()
    );
    assert_ne!(fs::read(s1.join(f)).unwrap(), fs::read(s2.join(f)).unwrap());
    // Two draws under one seed also differ from each other.
    assert_ne!(
        fs::read(s1.join("sample_g00002_00.ppm")).unwrap(),
        fs::read(s1.join("sample_g00002_01.ppm")).unwrap()
    );
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn eval_writes_a_parsable_report() {
    let dir = tmp("eval");
    let manifest = synth(&dir, 30);
    let cfg = write_config(&dir, &manifest, 8, "full");
    let run_dir = dir.join("run");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let report_path = dir.join("report.txt");
    assert_ok(&run(&[
        "eval",
        "--ckpt",
        run_dir.join("final.vun").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&report_path).unwrap();
    for key in [
        "ssim_mean",
        "recon_l1_mean",
        "pose_l2_mean",
        "transfer_l1_mean",
        "appearance_std_norm",
    ] {
        let line = text
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("missing {key} in report:\n{text}"));
        let value: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
        assert!(value.is_finite());
    }
    // The report is mirrored into the training metrics log.
    let log = fs::read_to_string(run_dir.join("metrics.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("eval: ssim_mean")));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn no_appearance_checkpoint_lacks_f_phi_records() {
    let dir = tmp("ablation");
    let manifest = synth(&dir, 24);
    let cfg = write_config(&dir, &manifest, 6, "no_appearance");
    let run_dir = dir.join("run");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let ck = vunet::checkpoint::Checkpoint::load(&run_dir.join("final.vun")).unwrap();
    assert!(!ck.records.is_empty());
    assert!(ck.records.iter().all(|r| !r.name.contains("f_phi")));
    assert!(ck.records.iter().any(|r| r.name.starts_with("e_theta")));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn checkpoint_save_load_save_is_bitwise() {
    let dir = tmp("ckbits");
    let manifest = synth(&dir, 24);
    let cfg = write_config(&dir, &manifest, 4, "full");
    let run_dir = dir.join("run");
    assert_ok(&run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let path = run_dir.join("final.vun");
    let original = fs::read(&path).unwrap();
    let ck = vunet::checkpoint::Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), original);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn error_codes_are_machine_parsable() {
    // Missing data file.
    let out = run(&[
        "train",
        "--config",
        "/nonexistent/exp.cfg",
        "--out",
        "/tmp/unused_vunet_out",
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: DATA_MISSING: "), "{err}");

    // Config with an unknown key.
    let dir = tmp("errors");
    let bad_cfg = dir.join("bad.cfg");
    fs::write(&bad_cfg, "[model]\nimadge_size = 32\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: CONFIG_PARSE: "));

    // Corrupt checkpoint.
    let bad_ckpt = dir.join("bad.vun");
    fs::write(&bad_ckpt, b"VUN1 garbage").unwrap();
    let out = run(&[
        "sample",
        "--ckpt",
        bad_ckpt.to_str().unwrap(),
        "--keypoints",
        bad_ckpt.to_str().unwrap(),
        "--seed",
        "1",
        "--count",
        "1",
        "--out",
        dir.join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: CKPT_CORRUPT: "));

    // Unknown command prints usage and fails as a config error.
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn gradcheck_blocks_scope_passes() {
    let out = run(&["gradcheck", "--scope", "blocks"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("residual_block: max_rel_error"));
    assert!(stdout.contains("< 1e-6"));
}
