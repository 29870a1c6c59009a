//! Shared inputs for the criterion benchmarks.

use idet_core::data::{synth_pair, ImagePair, SynthConfig};
use idet_core::{RngSeed, Tensor};
use rand::Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = RngSeed(seed).rng();
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0f32))
}

/// `n` default-sized synthetic pairs.
pub fn pairs(n: usize) -> Vec<ImagePair> {
    let cfg = SynthConfig {
        n_pairs: n,
        ..SynthConfig::default()
    };
    (0..n).map(|i| synth_pair(&cfg, i).expect("default synthetic config")).collect()
}
