//! Criterion benches for the data-parallel kernels and a full training
//! step, each measured with the rayon fan-out enabled and with the
//! sequential fallback forced (`par::set_parallel(false)`).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vunet::config::Config;
use vunet::conv::{conv2d_backward, conv2d_forward};
use vunet::eval::ssim;
use vunet::par;
use vunet::rng::Rng;
use vunet::synthglyph::{generate_dataset, render_glyph, sample_factors};
use vunet::tensor::Tensor;
use vunet::trainer::{init_pass, load_dataset, train_step, LoadedDataset, ModelCtx};

fn with_modes(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    for (mode, enabled) in [("parallel", true), ("sequential", false)] {
        par::set_parallel(enabled);
        c.bench_function(&format!("{name}/{mode}"), |b| b.iter(&mut f));
    }
    par::set_parallel(true);
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::derive(1, "bench.conv");
    let x = Tensor::<f32>::randn(&[16, 16, 32, 32], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[32, 16, 3, 3], 0.1, &mut rng);
    let bias = Tensor::<f32>::randn(&[32], 0.1, &mut rng);
    with_modes(c, "conv2d_forward_16x16x32x32", || {
        black_box(conv2d_forward(black_box(&x), &w, Some(&bias), 1).unwrap());
    });

    let y = conv2d_forward(&x, &w, Some(&bias), 1).unwrap();
    let mut rng = Rng::derive(2, "bench.conv.dy");
    let dy = Tensor::<f32>::randn(y.shape(), 1.0, &mut rng);
    with_modes(c, "conv2d_backward_16x16x32x32", || {
        black_box(conv2d_backward(black_box(&x), &w, 1, &dy).unwrap());
    });
}

fn bench_train_step(c: &mut Criterion) {
    let dir = std::env::temp_dir().join(format!("vunet_bench_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let manifest = generate_dataset(64, 32, 77, &dir).unwrap();
    let mut cfg = Config::default();
    cfg.model.image_size = 32;
    cfg.model.n_blocks = 3;
    cfg.model.z_channels = 8;
    cfg.model.base_width = 8;
    cfg.model.width_cap = 32;
    cfg.train.batch_size = 16;
    cfg.data.manifest = manifest;
    let ds: LoadedDataset = load_dataset(&cfg).unwrap();
    let mut ctx = ModelCtx::fresh(cfg).unwrap();
    let mut optim = ctx.optimizer();
    init_pass(&mut ctx, &ds).unwrap();

    let mut group = c.benchmark_group("train_step_32px_n3");
    group.sample_size(10);
    for (mode, enabled) in [("parallel", true), ("sequential", false)] {
        par::set_parallel(enabled);
        let mut step = 0usize;
        group.bench_function(mode, |b| {
            b.iter(|| {
                train_step(&mut ctx, &mut optim, &ds, step).unwrap();
                step += 1;
            })
        });
    }
    par::set_parallel(true);
    group.finish();
    let _ = std::fs::remove_dir_all(&dir);
}

fn bench_eval_primitives(c: &mut Criterion) {
    let mut rng = Rng::derive(2, "bench.eval");
    let (pose, appearance) = sample_factors(&mut rng);
    c.bench_function("render_glyph_32", |b| {
        b.iter(|| black_box(render_glyph(&pose, &appearance, 32)))
    });
    let a = render_glyph(&pose, &appearance, 32);
    let (pose2, _) = sample_factors(&mut rng);
    let bimg = render_glyph(&pose2, &appearance, 32);
    c.bench_function("ssim_32", |b| {
        b.iter(|| black_box(ssim(&a, &bimg).unwrap()))
    });
}

criterion_group!(benches, bench_conv, bench_train_step, bench_eval_primitives);
criterion_main!(benches);
