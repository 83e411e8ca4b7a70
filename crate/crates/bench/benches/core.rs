use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pipenet_core::lfv::{limited_frame_vote, LfvConfig};
use pipenet_core::model::{build_pipenet, named_portfolio_with, ArchWidths, ModalBatch};
use pipenet_core::nn::{softmax_cross_entropy, Tensor};
use pipenet_core::PerModality;

fn desk_widths() -> ArchWidths {
    ArchWidths {
        stem_channels: 16,
        stage_channels: (32, 64),
        cardinality: 8,
        fusion_channels: 64,
        fusion_repeats: 2,
        srb_repeats: (2, 2),
    }
}

fn batch(n: usize, patch: usize) -> ModalBatch {
    PerModality::from_fn(|m| {
        let len = n * patch * patch;
        let data = (0..len).map(|i| ((i * 7919 + m.index() * 31) % 255) as f64 / 127.5 - 1.0).collect();
        Tensor::from_vec([n, 1, patch, patch], data)
    })
}

fn lfv(c: &mut Criterion) {
    let probs: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 0.05 } else { 0.8 + (i % 7) as f64 * 0.01 }).collect();
    let cfg = LfvConfig::default();
    c.bench_function("lfv/64_frames", |b| b.iter(|| limited_frame_vote(&probs, &cfg).unwrap()));
}

fn model(c: &mut Criterion) {
    let spec = named_portfolio_with("P5", &desk_widths()).unwrap();
    let mut net = build_pipenet(&spec, PerModality::new(1, 1, 1), 32, 0).unwrap();
    let input = batch(16, 32);
    let targets: Vec<usize> = (0..16).map(|i| i % 2).collect();

    let mut group = c.benchmark_group("p5_desk");
    group.sample_size(10);
    group.bench_function("forward_b16", |b| b.iter(|| net.forward(&input).unwrap()));
    group.bench_function("train_step_b16", |b| {
        b.iter_batched(
            || input.clone(),
            |x| {
                net.zero_grad();
                let logits = net.forward_train(&x).unwrap();
                net.backward(&softmax_cross_entropy(&logits, &targets).grad);
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, lfv, model);
criterion_main!(benches);
