mod common;

use common::*;
use ctt_core::bank::compute_k;
use ctt_core::config::poly_lr;
use ctt_core::eval::{pseudo_label_quality, ConfusionMatrix};
use ctt_core::losses::{hc_loss, hc_mask, lc_loss, lc_mask, pixel_cross_entropy, total_loss, LossComponents, LossWeights};
use ctt_core::{BinaryMask, Matrix, MemoryBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    fa: Vec<Vec<f64>>,
    fb: Vec<Vec<f64>>,
    classes: Vec<u8>,
    mask: Vec<u8>,
    bank_a: MemoryBank<f64>,
    bank_b: MemoryBank<f64>,
    tau: f64,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = rng.random_range(2..=4);
    let cap = rng.random_range(1..=8);
    let d = rng.random_range(2..=8);
    let q = rng.random_range(1..=16);
    Instance {
        fa: (0..q).map(|_| unit_vector(&mut rng, d)).collect(),
        fb: (0..q).map(|_| unit_vector(&mut rng, d)).collect(),
        classes: (0..q).map(|_| rng.random_range(0..nc) as u8).collect(),
        mask: (0..q).map(|_| rng.random_bool(0.7) as u8).collect(),
        bank_a: full_bank(&mut rng, nc, cap, d),
        bank_b: full_bank(&mut rng, nc, cap, d),
        tau: rng.random_range(0.1..1.0),
    }
}

#[test]
fn hc_and_lc_match_scalar_reference() {
    for seed in 0..60 {
        let t = instance(seed);
        let fa = Matrix::from_rows(&t.fa).unwrap();
        let fb = Matrix::from_rows(&t.fb).unwrap();
        let mask = BinaryMask(t.mask.clone());
        let hc = hc_loss(&fa, &t.classes, &mask, &t.bank_a, t.tau).unwrap().value;
        let want = hc_reference(&t.fa, &t.classes, &t.mask, &t.bank_a, t.tau);
        assert!(rel_close(hc, want, 1e-9), "seed {seed}: hc {hc} vs {want}");
        let lc = lc_loss(&fa, &fb, &t.classes, &mask, &t.bank_a, &t.bank_b, t.tau)
            .unwrap()
            .value;
        let want = lc_reference(&t.fa, &t.fb, &t.classes, &t.mask, &t.bank_a, &t.bank_b, t.tau);
        assert!(rel_close(lc, want, 1e-9), "seed {seed}: lc {lc} vs {want}");
    }
}

#[test]
fn kernel_gradients_match_finite_differences_on_features() {
    let h = 1e-6;
    for seed in 100..110 {
        let t = instance(seed);
        let fa = Matrix::from_rows(&t.fa).unwrap();
        let fb = Matrix::from_rows(&t.fb).unwrap();
        let mask = BinaryMask(t.mask.clone());
        let g_hc = hc_loss(&fa, &t.classes, &mask, &t.bank_a, t.tau).unwrap().grad;
        let g_lc = lc_loss(&fa, &fb, &t.classes, &mask, &t.bank_a, &t.bank_b, t.tau)
            .unwrap()
            .grad;
        for i in 0..t.fa.len() {
            for k in 0..t.fa[0].len() {
                let mut up = t.fa.clone();
                let mut dn = t.fa.clone();
                up[i][k] += h;
                dn[i][k] -= h;
                let fd = (hc_reference(&up, &t.classes, &t.mask, &t.bank_a, t.tau)
                    - hc_reference(&dn, &t.classes, &t.mask, &t.bank_a, t.tau))
                    / (2.0 * h);
                assert!((fd - g_hc.get(i, k)).abs() < 1e-6, "hc seed {seed} ({i},{k})");
                let fd = (lc_reference(&up, &t.fb, &t.classes, &t.mask, &t.bank_a, &t.bank_b, t.tau)
                    - lc_reference(&dn, &t.fb, &t.classes, &t.mask, &t.bank_a, &t.bank_b, t.tau))
                    / (2.0 * h);
                assert!((fd - g_lc.get(i, k)).abs() < 1e-6, "lc seed {seed} ({i},{k})");
            }
        }
    }
}

#[test]
fn published_hyperparameter_values() {
    assert_eq!(poly_lr(2.5e-4, 0, 80_000, 0.9).unwrap(), 2.5e-4);
    assert_eq!(poly_lr(2.5e-4, 80_000, 80_000, 0.9).unwrap(), 0.0);
    let half = poly_lr(2.5e-4, 40_000, 80_000, 0.9).unwrap();
    assert!((half - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-15);
    assert!((half - 1.3397e-4).abs() < 1e-8);
    assert!(poly_lr(2.5e-4, 80_001, 80_000, 0.9).is_err());
    assert_eq!(compute_k(2975, 128).unwrap(), 23);
    assert_eq!(compute_k(100, 128).unwrap(), 1);
    assert_eq!(compute_k(128, 128).unwrap(), 1);
    let w = LossWeights::default();
    assert_eq!((w.sup, w.ct, w.hc, w.lc), (1.0, 1.0, 0.1, 0.1));
    let c = LossComponents {
        sup: 2.0,
        ct: 3.0,
        hc: 10.0,
        lc: 20.0,
    };
    assert!((total_loss(&c, &w, true).unwrap() - 8.0).abs() < 1e-12);
    assert_eq!(total_loss(&c, &w, false).unwrap(), 5.0);
}

#[test]
fn uniform_probabilities_give_log_class_count() {
    for c in 2..=7 {
        let p = Matrix::from_vec(5, c, vec![1.0 / c as f64; 5 * c]).unwrap();
        for t in 0..c as u8 {
            let l = pixel_cross_entropy(&p, &[t; 5]).unwrap();
            assert!((l.value - (c as f64).ln()).abs() < 1e-6);
        }
    }
}

#[test]
fn masks_follow_their_truth_tables_on_a_grid() {
    let grid = [0.2f64, 0.5, 0.75, 0.9];
    let phi = 0.75;
    for &ca in &grid {
        for &cb in &grid {
            let m = hc_mask(&[ca], phi);
            assert_eq!(m.0[0], (ca > phi) as u8);
            let l = lc_mask(&m, &[ca], &[cb], true).unwrap();
            assert_eq!(l.0[0], ((ca <= phi) && ca < cb) as u8);
            let l = lc_mask(&m, &[ca], &[cb], false).unwrap();
            assert_eq!(l.0[0], (ca <= phi) as u8);
        }
    }
}

#[test]
fn miou_hand_example() {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
    assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 1)), (1, 1, 2));
    let (per, mean) = cm.miou().unwrap();
    assert!((per[0].unwrap() - 0.5).abs() < 1e-12);
    assert!((per[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((mean - 0.583_333).abs() < 1e-4);
}

#[test]
fn random_pseudo_labels_score_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 40_000;
    let gt: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
    let pseudo: Vec<u8> = (0..n).map(|_| rng.random_range(0..4u8)).collect();
    let q = pseudo_label_quality(&pseudo, &gt);
    assert!((q - 0.25).abs() < 0.02, "{q}");
}
