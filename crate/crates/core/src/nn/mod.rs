//! Desk-scale Vision Transformer with block reweighting, top-down block
//! pruning and LoRA adapters on the attention query/value projections.

mod checkpoint;
mod lora;
mod vit;

pub use checkpoint::{
    load_checkpoint, read_tensors, save_checkpoint, write_tensors, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::Reader;
pub use lora::{Lora, LoraConfig};
pub use vit::{
    effective_weight, patchify, ForwardOutput, Hooks, Layer, Linear, Param, ReMemConfig, VitConfig, VitModel,
};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// Draws from N(0, σ²) truncated to ±2σ by rejection.
pub fn trunc_normal(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

pub fn normal(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Uniform in [-bound, bound].
pub fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}
