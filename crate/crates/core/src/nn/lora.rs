use serde::{Deserialize, Serialize};

use super::vit::{Linear, Param};
use super::normal;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 32, alpha: 32.0 }
    }
}

/// Low-rank update `ΔW = B·A` with `A: r×d_in` and `B: d_out×r`, scaled by
/// `alpha / r`. In the row-vector convention used here the adapted layer
/// computes `x·W + (alpha/r)·x·Aᵀ·Bᵀ`.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl Lora {
    /// `A ~ N(0, 0.01²)`, `B = 0`, so a fresh adapter leaves the layer unchanged.
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize, cfg: &LoraConfig) -> Result<Lora> {
        if cfg.rank == 0 || cfg.rank > d_in.min(d_out) {
            return Err(Error::Parameter(format!(
                "LoRA rank {} must be in 1..={}",
                cfg.rank,
                d_in.min(d_out)
            )));
        }
        Ok(Lora {
            a: Tensor::param(normal(rng, cfg.rank * d_in, 0.01), &[cfg.rank, d_in])?,
            b: Tensor::param(vec![0.0; d_out * cfg.rank], &[d_out, cfg.rank])?,
            scaling: cfg.alpha / cfg.rank as f64,
        })
    }

    pub fn from_parts(a: Tensor, b: Tensor, alpha: f64) -> Result<Lora> {
        let r = a.shape()[0];
        if b.shape().len() != 2 || b.shape()[1] != r {
            return Err(Error::shape("lora", a.shape(), b.shape()));
        }
        Ok(Lora {
            a,
            b,
            scaling: alpha / r as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.a.transpose()?)?.matmul(&self.b.transpose()?)?.scale(self.scaling))
    }

    pub fn forward(&self, base: &Linear, x: &Tensor) -> Result<Tensor> {
        base.forward(x)?.add(&self.delta(x)?)
    }

    /// `W ← W + (alpha/r)·(B·A)ᵀ`.
    pub fn merge_into(&self, base: &Linear) -> Result<()> {
        let (r, d_in) = (self.rank(), self.a.shape()[1]);
        let d_out = self.b.shape()[0];
        if base.d_in() != d_in || base.d_out() != d_out {
            return Err(Error::shape("lora merge", base.weight.shape(), &[d_in, d_out]));
        }
        let a = self.a.data();
        let b = self.b.data();
        let mut w = base.weight.to_vec();
        for i in 0..d_in {
            for o in 0..d_out {
                let ba: f64 = (0..r).map(|k| b[o * r + k] * a[k * d_in + i]).sum();
                w[i * d_out + o] += self.scaling * ba;
            }
        }
        drop((a, b));
        base.weight.set_data(w)
    }

    pub(super) fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param {
            name: format!("{prefix}.a"),
            tensor: self.a.clone(),
            decay: true,
        });
        out.push(Param {
            name: format!("{prefix}.b"),
            tensor: self.b.clone(),
            decay: true,
        });
    }
}
