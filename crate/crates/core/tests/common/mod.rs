#![allow(dead_code)]

//! Independent references used by the integration tests. Everything here is
//! written as plainly as possible and shares no code with the crate's
//! kernels beyond the public types.

use ctt_core::losses::{
    cross_teacher_loss, hc_loss, lc_loss, make_pseudo_labels, pixel_cross_entropy, LossGrad,
};
use ctt_core::model::{backward, forward, forward_train, init_model, BackboneConfig, ImageBatch, ModelParams};
use ctt_core::tensor::{l2_normalize_backward, l2_normalize_rows};
use ctt_core::{BinaryMask, Matrix, MemoryBank, Sample, SceneSpec, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config() -> BackboneConfig {
    BackboneConfig {
        feature_dim: 8,
        stride: 2,
        channels: vec![4, 6],
        num_classes: 3,
        init_seed: 11,
    }
}

pub fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch {
        n,
        height: h,
        width: w,
        data: (0..n * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

pub fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn full_bank<R: Rng>(rng: &mut R, nc: usize, cap: usize, d: usize) -> MemoryBank<f64> {
    let mut bank = MemoryBank::new(nc, cap, d).unwrap();
    for c in 0..nc {
        let vs: Vec<Vec<f64>> = (0..cap).map(|_| unit_vector(rng, d)).collect();
        bank.push(c, &vs).unwrap();
    }
    bank
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// One InfoNCE term written directly from its definition.
fn nce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let p = (dot(q, pos) / tau).exp();
    let mut denom = p;
    for n in negs {
        denom += (dot(q, n) / tau).exp();
    }
    -(p / denom).ln()
}

fn queue(bank: &MemoryBank<f64>, c: usize) -> Vec<Vec<f64>> {
    bank.queue(c).iter().cloned().collect()
}

fn others(bank: &MemoryBank<f64>, c: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..bank.num_classes() {
        if k != c {
            out.extend(queue(bank, k));
        }
    }
    out
}

/// Triple loop: classes, queries, positives.
pub fn hc_reference(
    features: &[Vec<f64>],
    classes: &[u8],
    mask: &[u8],
    bank: &MemoryBank<f64>,
    tau: f64,
) -> f64 {
    let mut per_class = Vec::new();
    for c in 0..bank.num_classes() {
        let pos = queue(bank, c);
        let negs = others(bank, c);
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..features.len() {
            if mask[i] == 0 || classes[i] as usize != c {
                continue;
            }
            for p in &pos {
                sum += nce(&features[i], p, &negs, tau);
                count += 1;
            }
        }
        if count > 0 {
            per_class.push(sum / count as f64);
        }
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

pub fn lc_reference(
    fa: &[Vec<f64>],
    fb: &[Vec<f64>],
    classes: &[u8],
    mask: &[u8],
    bank_a: &MemoryBank<f64>,
    bank_b: &MemoryBank<f64>,
    tau: f64,
) -> f64 {
    let mut per_class = Vec::new();
    for c in 0..bank_a.num_classes() {
        let mut negs = others(bank_a, c);
        negs.extend(others(bank_b, c));
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..fa.len() {
            if mask[i] == 0 || classes[i] as usize != c {
                continue;
            }
            sum += nce(&fa[i], &fb[i], &negs, tau);
            count += 1;
        }
        if count > 0 {
            per_class.push(sum / count as f64);
        }
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// A small fixed dataset for trainer tests: 32x32 images, 4 classes.
pub fn tiny_scene() -> SceneSpec {
    SceneSpec {
        image_size: (32, 32),
        num_classes: 4,
        shapes_per_image: (2, 4),
        color_jitter: 0.2,
        noise_std: 0.02,
        seed: 3,
    }
}

pub fn samples(spec: &SceneSpec, n: usize) -> Vec<Sample> {
    ctt_core::data::generate_dataset(spec, n).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

/// Central-difference check of `analytic` against `objective` at `params`.
/// Returns (fraction of coordinates within `tol` relative, worst relative
/// error). Coordinates where both sides are below 1e-8 in magnitude count
/// as matching.
pub fn grad_check(
    params: &ModelParams<f64>,
    analytic: &[f64],
    step: f64,
    tol: f64,
    objective: impl Fn(&ModelParams<f64>) -> f64,
) -> (f64, f64) {
    let mut ok = 0usize;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut up = params.clone();
        up.data[i] += step;
        let mut dn = params.clone();
        dn.data[i] -= step;
        let fd = (objective(&up) - objective(&dn)) / (2.0 * step);
        let a = analytic[i];
        let diff = (fd - a).abs();
        let rel = if diff < 1e-8 { 0.0 } else { diff / fd.abs().max(a.abs()) };
        worst = worst.max(rel);
        if rel <= tol {
            ok += 1;
        }
    }
    (ok as f64 / params.len() as f64, worst)
}

/// One loss as a function of a toy model's parameters, with its analytic
/// gradient at `params`. Discrete choices (targets, masks, class
/// assignments) are fixed up front, as they are within a training step.
pub struct GradCase {
    pub name: &'static str,
    pub params: ModelParams<f64>,
    pub analytic: Vec<f64>,
    pub objective: Box<dyn Fn(&ModelParams<f64>) -> f64>,
}

fn normalized_features(params: &ModelParams<f64>, batch: &ImageBatch<f64>) -> Matrix<f64> {
    l2_normalize_rows(&forward(params, batch).unwrap().features).0
}

/// Analytic gradient of a loss that is a function of normalized features.
fn feature_loss_grad(
    params: &ModelParams<f64>,
    batch: &ImageBatch<f64>,
    loss: impl Fn(&Matrix<f64>) -> LossGrad<f64>,
) -> Vec<f64> {
    let (out, cache) = forward_train(params, batch).unwrap();
    let (zn, norms) = l2_normalize_rows(&out.features);
    let g = loss(&zn).grad;
    let dz = l2_normalize_backward(&zn, &norms, &g);
    backward(params, &cache, Some(&dz), None).unwrap()
}

/// Toy parameters with small random biases. Zero biases leave pixels whose
/// fused activations are all dead with an exactly zero feature row, where
/// normalization has a kink.
fn generic_params(cfg: &BackboneConfig, seed: u64) -> ModelParams<f64> {
    let mut p: ModelParams<f64> = init_model(&BackboneConfig { init_seed: seed, ..cfg.clone() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for spec in p.layout.clone().params.iter().filter(|s| s.name.ends_with(".bias")) {
        for v in &mut p.data[spec.offset..spec.offset + spec.len] {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    p
}

pub fn grad_cases() -> Vec<GradCase> {
    let cfg = toy_config();
    let nc = cfg.num_classes;
    let pa = generic_params(&cfg, cfg.init_seed);
    let pb = generic_params(&cfg, 12);
    let ta = generic_params(&cfg, 13);
    let tb = generic_params(&cfg, 14);
    let batch = random_batch(2, 8, 8, 5);
    let rows = forward(&pa, &batch).unwrap().pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let gt: Vec<u8> = (0..rows)
        .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..nc as u8) })
        .collect();
    let classes: Vec<u8> = (0..rows).map(|_| rng.random_range(0..nc as u8)).collect();
    let mask = BinaryMask((0..rows).map(|_| rng.random_bool(0.6) as u8).collect());
    let lmask = BinaryMask(mask.0.iter().map(|&m| 1 - m).collect());
    let d = cfg.feature_dim;
    let bank_a = full_bank(&mut rng, nc, 4, d);
    let bank_b = full_bank(&mut rng, nc, 4, d);
    let tau = 0.5;

    let mut cases = Vec::new();

    {
        let (batch, gt) = (batch.clone(), gt.clone());
        let (out, cache) = forward_train(&pa, &batch).unwrap();
        let l = pixel_cross_entropy(&out.probs, &gt).unwrap();
        let analytic = backward(&pa, &cache, None, Some(&l.grad)).unwrap();
        cases.push(GradCase {
            name: "sup",
            params: pa.clone(),
            analytic,
            objective: Box::new(move |p| {
                let o = forward(p, &batch).unwrap();
                pixel_cross_entropy(&o.probs, &gt).unwrap().value
            }),
        });
    }
    {
        let batch = batch.clone();
        let ya = make_pseudo_labels(&forward(&ta, &batch).unwrap());
        let yb = make_pseudo_labels(&forward(&tb, &batch).unwrap());
        let pb_probs = forward(&pb, &batch).unwrap().probs;
        let (out, cache) = forward_train(&pa, &batch).unwrap();
        let l = cross_teacher_loss(&[&out.probs, &pb_probs], &[&ya, &yb]).unwrap();
        let analytic = backward(&pa, &cache, None, Some(&l.grads[0])).unwrap();
        cases.push(GradCase {
            name: "ct",
            params: pa.clone(),
            analytic,
            objective: Box::new(move |p| {
                let o = forward(p, &batch).unwrap();
                cross_teacher_loss(&[&o.probs, &pb_probs], &[&ya, &yb]).unwrap().total
            }),
        });
    }
    {
        let (batch, classes, mask, bank) = (batch.clone(), classes.clone(), mask.clone(), bank_a.clone());
        let analytic = feature_loss_grad(&pa, &batch, |z| hc_loss(z, &classes, &mask, &bank, tau).unwrap());
        cases.push(GradCase {
            name: "hc",
            params: pa.clone(),
            analytic,
            objective: Box::new(move |p| {
                hc_loss(&normalized_features(p, &batch), &classes, &mask, &bank, tau)
                    .unwrap()
                    .value
            }),
        });
    }
    {
        let batch = batch.clone();
        let zb = normalized_features(&pb, &batch);
        let analytic = feature_loss_grad(&pa, &batch, |z| {
            lc_loss(z, &zb, &classes, &lmask, &bank_a, &bank_b, tau).unwrap()
        });
        cases.push(GradCase {
            name: "lc",
            params: pa.clone(),
            analytic,
            objective: Box::new(move |p| {
                lc_loss(&normalized_features(p, &batch), &zb, &classes, &lmask, &bank_a, &bank_b, tau)
                    .unwrap()
                    .value
            }),
        });
    }
    cases
}
