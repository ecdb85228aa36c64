use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use draformer::data::synthetic_sinusoid_ar;
use draformer::ida::mahalanobis_sq;
use draformer::series::{difference, estimate_covariance};
use draformer::{make_windows, Draformer, TrainConfig};

fn desk() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        ..TrainConfig::desk_scale()
    }
}

fn forward(c: &mut Criterion) {
    let cfg = desk();
    let frame = synthetic_sinusoid_ar(400, 2, 0);
    let windows = make_windows(&frame, cfg.input_len, cfg.pred_len, 24).unwrap();
    let model = Draformer::new(cfg.clone(), 2).unwrap();
    let ablated = Draformer::new(
        TrainConfig {
            replace_recon_attention: true,
            ..cfg.clone()
        },
        2,
    )
    .unwrap();
    let batch = &windows[..cfg.batch_size];

    c.bench_function("mahalanobis 48x2", |b| {
        b.iter(|| {
            let t = difference(&windows[0].x).unwrap();
            let cov = estimate_covariance(&t.d_fwd, &t.d_bwd, cfg.lambda).unwrap();
            black_box(mahalanobis_sq(&t.d_fwd, &t.d_bwd, &cov).unwrap())
        })
    });
    c.bench_function("predict desk", |b| {
        b.iter(|| black_box(model.predict(&windows[0].x).unwrap()))
    });
    c.bench_function("predict desk -attention", |b| {
        b.iter(|| black_box(ablated.predict(&windows[0].x).unwrap()))
    });
    c.bench_function("loss_and_grads desk batch 8", |b| {
        b.iter(|| black_box(model.loss_and_grads(batch).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward
}
criterion_main!(benches);
