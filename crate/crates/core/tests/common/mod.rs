#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tetranet::arch::{Dec2Variant, ModelConfig};
use tetranet::data::{LabelMap, Volume};
use tetranet::Tensor;

pub fn small_cfg(levels: usize, variant: Dec2Variant) -> ModelConfig {
    ModelConfig {
        decoder_levels: levels,
        dec2_variant: variant,
        ..ModelConfig::with_widths(&[4, 6, 6, 8])
    }
}

pub fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(dims, |_| rng.random::<f64>())
}

pub fn random_labels(dims: [usize; 3], n: u32, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = dims.iter().product();
    LabelMap::new(dims, (0..v).map(|_| rng.random_range(0..=n)).collect()).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}
