//! Fixtures shared by the benchmarks.

use ctt_core::data::generate_dataset;
use ctt_core::{BinaryMask, ImageBatch, Matrix, MemoryBank, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` default-size synthetic images as one batch.
pub fn image_batch(n: usize) -> ImageBatch<f32> {
    let samples = generate_dataset(&SceneSpec::default(), n).expect("default scene is valid");
    ImageBatch::from_samples(samples.iter()).expect("equal sizes")
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    v.into_iter().map(|x| x / n).collect()
}

pub fn full_bank(seed: u64, classes: usize, capacity: usize, d: usize) -> MemoryBank<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = MemoryBank::new(classes, capacity, d).expect("valid bank shape");
    for c in 0..classes {
        let vs: Vec<Vec<f32>> = (0..capacity).map(|_| unit(&mut rng, d)).collect();
        bank.push(c, &vs).expect("dimension matches");
    }
    bank
}

/// Unit query rows with random classes and a mask covering about half.
pub fn queries(seed: u64, rows: usize, classes: usize, d: usize) -> (Matrix<f32>, Vec<u8>, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f32>> = (0..rows).map(|_| unit(&mut rng, d)).collect();
    let cls = (0..rows).map(|_| rng.random_range(0..classes as u8)).collect();
    let mask = BinaryMask((0..rows).map(|_| rng.random_bool(0.5) as u8).collect());
    (Matrix::from_rows(&data).expect("rectangular"), cls, mask)
}
