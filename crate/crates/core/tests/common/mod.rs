#![allow(dead_code)]

use nnrw::{LayerSpec, ModelContainer, WeightTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x` rounded to `digits` significant decimal digits, then to f32.
pub fn round_sig(x: f32, digits: usize) -> f32 {
    format!("{:.*e}", digits - 1, x).parse().unwrap()
}

/// Weights ~ N(0, sigma), each rounded to `digits` significant digits
/// (`None` keeps full precision), with a sprinkling of zeros, subnormals and
/// exact dyadic values.
pub fn weights(rng: &mut impl Rng, len: usize, sigma: f32, digits: Option<usize>) -> Vec<f32> {
    let normal = Normal::new(0.0f32, sigma).unwrap();
    (0..len)
        .map(|_| {
            let roll: f64 = rng.random();
            if roll < 0.002 {
                0.0
            } else if roll < 0.004 {
                f32::from_bits(rng.random_range(1..0x0080_0000)) * if rng.random() { 1.0 } else { -1.0 }
            } else if roll < 0.006 {
                let e = rng.random_range(2..12);
                let v = 2f32.powi(-e);
                if rng.random() { v } else { -v }
            } else {
                let x = normal.sample(rng);
                digits.map_or(x, |d| round_sig(x, d))
            }
        })
        .collect()
}

pub fn conv(name: &str, shape: [usize; 4], data: Vec<f32>) -> WeightTensor {
    WeightTensor::new(name, shape.to_vec(), data).unwrap()
}

/// A model whose manifest lists one layer per tensor.
pub fn model(tensors: Vec<WeightTensor>) -> ModelContainer {
    let manifest = (0..tensors.len())
        .map(|i| LayerSpec {
            weight_tensor: i,
            stride: 1,
            padding: 1,
        })
        .collect();
    ModelContainer::new(tensors, manifest).unwrap()
}

pub fn random_bits(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random()).collect()
}
