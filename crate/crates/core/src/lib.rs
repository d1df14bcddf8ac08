//! Desk-scale laboratory for mutual-information-aware fine-tuning of Vision
//! Transformers and knowledge distillation into small students.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine over dense arrays.
//! - [`nn`]: a Vision Transformer with MLP/attention reweighting, top-down
//!   block pruning and LoRA adapters, plus checkpoint IO.
//! - [`optim`]: SGD with momentum, the SAM wrapper, AdamW and the
//!   warmup-cosine schedule.
//! - [`finetune`]: teacher fine-tuning with SGD or SAM.
//! - [`data`]: the procedural shapes dataset, its binary file format and
//!   stratified splits.
//! - [`distill`]: students, distillation losses, trainers and the
//!   checkpoint/hyperparameter sweep protocol.
//! - [`infometer`]: the decoder-based mutual information proxy.
//! - [`expertness`]: activation graphs, cut and expertness, the MoE MLP and
//!   its information bound, and neuron criticality.

pub mod data;
pub mod distill;
pub mod error;
pub mod expertness;
pub mod finetune;
pub mod infometer;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
