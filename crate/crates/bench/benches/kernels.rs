use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctt_bench::{full_bank, image_batch, queries};
use ctt_core::losses::{hc_loss, lc_loss, pixel_cross_entropy};
use ctt_core::model::{backward, ema_update, forward, forward_train, init_model};
use ctt_core::tensor::l2_normalize_rows;
use ctt_core::{BackboneConfig, ModelParams, StudentTeacherPair};

fn network(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let params: ModelParams<f32> = init_model(&cfg).unwrap();
    let batch = image_batch(8);
    c.bench_function("forward_8x64x64", |b| b.iter(|| forward(&params, &batch).unwrap()));
    c.bench_function("forward_backward_8x64x64", |b| {
        b.iter(|| {
            let (out, cache) = forward_train(&params, &batch).unwrap();
            let targets = out.hard_labels.clone();
            let g = pixel_cross_entropy(&out.probs, &targets).unwrap().grad;
            backward(&params, &cache, None, Some(&g)).unwrap()
        })
    });
    let mut pair = StudentTeacherPair {
        student: params.clone(),
        teacher: init_model(&BackboneConfig { init_seed: 2, ..cfg }).unwrap(),
        ema_decay: 0.99,
    };
    c.bench_function("ema_update", |b| b.iter(|| ema_update(&mut pair).unwrap()));
}

fn contrastive(c: &mut Criterion) {
    let (nc, d) = (4, 64);
    let mut group = c.benchmark_group("contrastive");
    for cap in [16usize, 64] {
        let bank_a = full_bank(1, nc, cap, d);
        let bank_b = full_bank(2, nc, cap, d);
        let (za, classes, mask) = queries(3, 2048, nc, d);
        let (zb, _, _) = queries(4, 2048, nc, d);
        let (za, _) = l2_normalize_rows(&za);
        group.bench_with_input(BenchmarkId::new("hc_2048q", cap), &cap, |b, _| {
            b.iter(|| hc_loss(&za, &classes, &mask, &bank_a, 0.5).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("lc_2048q", cap), &cap, |b, _| {
            b.iter(|| lc_loss(&za, &zb, &classes, &mask, &bank_a, &bank_b, 0.5).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, network, contrastive);
criterion_main!(benches);
