//! Teacher fine-tuning: cross-entropy on labels with SGD or SAM under a
//! warmup-cosine schedule, recording parameter snapshots at chosen steps.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::BatchStream;
use crate::error::{Error, Result};
use crate::nn::{LoraConfig, NamedTensor, ReMemConfig, VitModel};
use crate::optim::{sam_step, sgd_step, AdamwState, SamConfig, Schedule, SgdState};
use crate::rng::{rng_for, sub_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// SAM radius; 0 trains with plain SGD.
    pub sam_rho: f64,
    /// Steps after which a snapshot is kept; the final step is always kept.
    pub checkpoint_steps: Vec<usize>,
    /// Trains low-rank adapters on query/value instead of the full model,
    /// merging them back at the end.
    pub lora: Option<LoraConfig>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 400,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 20,
            sam_rho: 0.0,
            checkpoint_steps: Vec::new(),
            lora: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub losses: Vec<f64>,
    /// `(steps completed, state)` in increasing step order.
    pub checkpoints: Vec<(usize, Vec<NamedTensor>)>,
}

impl FinetuneRun {
    pub fn checkpoint(&self, step: usize) -> Option<&[NamedTensor]> {
        self.checkpoints.iter().find(|(s, _)| *s == step).map(|(_, st)| st.as_slice())
    }
}

/// Fine-tunes `model` in place on `train` under `remem`. Deterministic given
/// `seed`.
pub fn finetune(model: &mut VitModel, remem: &ReMemConfig, train: &Dataset, cfg: &FinetuneConfig, seed: u64) -> Result<FinetuneRun> {
    remem.validate(model.config.n_layers)?;
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Parameter("fine-tuning needs data and a positive batch size".into()));
    }
    if train.n_classes != model.config.n_classes {
        return Err(Error::shape(
            "finetune",
            &[model.config.n_classes],
            &[train.n_classes],
        ));
    }
    if let Some(&bad) = cfg.checkpoint_steps.iter().find(|&&s| s > cfg.steps) {
        return Err(Error::Parameter(format!("checkpoint step {bad} beyond {} steps", cfg.steps)));
    }
    if let Some(lora) = &cfg.lora {
        model.attach_lora(lora, sub_seed(seed, "lora"))?;
    }
    let params = model.active_parameters(remem);
    let mut opt = SgdState::new(
        Schedule::new(cfg.lr, cfg.warmup_steps.min(cfg.steps), cfg.steps)?,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    let sam = SamConfig { rho: cfg.sam_rho };
    let mut batches = BatchStream::new(train.len(), cfg.batch_size, rng_for(seed, "teacher-batches"));
    let mut run = FinetuneRun {
        losses: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    let keep = |step: usize| step == cfg.steps || cfg.checkpoint_steps.contains(&step);
    if keep(0) {
        run.checkpoints.push((0, merged_state(model)?));
    }
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let x = train.batch(&idx)?;
        let y = train.labels_of(&idx);
        let loss_fn = || model.forward(remem, &x)?.logits.cross_entropy(&y);
        let loss = if cfg.sam_rho > 0.0 {
            sam_step(&sam, &mut opt, &params, step, loss_fn).map(|info| info.loss)
        } else {
            sgd_step(&mut opt, &params, step, loss_fn)
        }
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("teacher step {step}: {msg}")),
            other => other,
        })?;
        run.losses.push(loss);
        if keep(step + 1) {
            run.checkpoints.push((step + 1, merged_state(model)?));
        }
    }
    if cfg.lora.is_some() {
        model.merge_lora()?;
    }
    Ok(run)
}

/// Settings for training a teacher from scratch before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 800,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

/// Trains every parameter of `model` on cross-entropy with AdamW; returns
/// the per-step losses.
pub fn pretrain(model: &VitModel, data: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Parameter("pretraining needs data and a positive batch size".into()));
    }
    if data.n_classes != model.config.n_classes {
        return Err(Error::shape("pretrain", &[model.config.n_classes], &[data.n_classes]));
    }
    let params = model.trainable_parameters();
    let mut opt = AdamwState::default();
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    let mut batches = BatchStream::new(data.len(), cfg.batch_size, rng_for(seed, "pretrain-batches"));
    let neutral = ReMemConfig::neutral();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let x = data.batch(&idx)?;
        let y = data.labels_of(&idx);
        model.zero_grad();
        let loss = model.forward(&neutral, &x)?.logits.cross_entropy(&y)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!("pretrain step {step}: loss {}", loss.item())));
        }
        loss.backward()?;
        opt.step(&params)?;
        losses.push(loss.item());
    }
    model.zero_grad();
    Ok(losses)
}

/// Model state with any attached adapters folded into the base weights.
fn merged_state(model: &VitModel) -> Result<Vec<NamedTensor>> {
    let has_lora = model.layers.iter().any(|l| l.query_lora.is_some() || l.value_lora.is_some());
    if !has_lora {
        return Ok(model.state());
    }
    let mut copy = model.snapshot();
    copy.merge_lora()?;
    Ok(copy.state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesSpec};
    use crate::distill::vit_accuracy;
    use crate::nn::VitConfig;

    fn setup() -> (VitModel, Dataset) {
        let data = generate_shapes(&ShapesSpec {
            n_classes: 2,
            image_size: 8,
            samples_per_class: 16,
            noise: 0.0,
            seed: 2,
            ..ShapesSpec::default()
        })
        .unwrap();
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            d_embed: 16,
            d_mlp: 32,
            n_layers: 2,
            n_classes: 2,
            ..VitConfig::default()
        };
        (VitModel::new(cfg, 1).unwrap(), data)
    }

    fn cfg(steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps,
            batch_size: 8,
            lr: 0.05,
            warmup_steps: 5,
            checkpoint_steps: vec![0, 10],
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn finetune_fits_and_keeps_checkpoints() {
        let (mut model, data) = setup();
        let run = finetune(&mut model, &ReMemConfig::neutral(), &data, &cfg(150), 0).unwrap();
        let steps: Vec<usize> = run.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(steps, vec![0, 10, 150]);
        assert_eq!(run.checkpoint(150).unwrap(), model.state().as_slice());
        let acc = vit_accuracy(&model, &ReMemConfig::neutral(), &data).unwrap();
        assert!(acc > 0.9, "{acc}");
    }

    #[test]
    fn zero_radius_matches_plain_sgd_and_replays() {
        let (mut a, data) = setup();
        let (mut b, _) = setup();
        let ra = finetune(&mut a, &ReMemConfig::neutral(), &data, &cfg(20), 3).unwrap();
        let rb = finetune(&mut b, &ReMemConfig::neutral(), &data, &cfg(20), 3).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn pruned_blocks_are_frozen_out() {
        let (mut model, data) = setup();
        let before = model.state();
        let remem = ReMemConfig {
            prune_mlp_top_k: 1,
            ..ReMemConfig::neutral()
        };
        let sam = FinetuneConfig {
            sam_rho: 0.5,
            ..cfg(12)
        };
        finetune(&mut model, &remem, &data, &sam, 0).unwrap();
        for ((name, _, old), (_, _, new)) in before.iter().zip(model.state()) {
            let frozen = name.starts_with("layers.1.mlp") || name.starts_with("layers.1.ln2");
            assert_eq!(frozen, *old == new, "{name}");
        }
    }

    #[test]
    fn pretraining_fits_and_replays() {
        let (a, data) = setup();
        let (b, _) = setup();
        let cfg = PretrainConfig {
            steps: 100,
            batch_size: 8,
            lr: 0.003,
            ..PretrainConfig::default()
        };
        let la = pretrain(&a, &data, &cfg, 4).unwrap();
        let lb = pretrain(&b, &data, &cfg, 4).unwrap();
        assert_eq!(la, lb);
        assert!(vit_accuracy(&a, &ReMemConfig::neutral(), &data).unwrap() > 0.9);
    }

    #[test]
    fn lora_finetune_touches_only_query_and_value() {
        let (mut model, data) = setup();
        let before = model.state();
        let run = FinetuneConfig {
            lora: Some(LoraConfig { rank: 2, alpha: 2.0 }),
            ..cfg(10)
        };
        finetune(&mut model, &ReMemConfig::neutral(), &data, &run, 0).unwrap();
        let after = model.state();
        assert_eq!(before.len(), after.len());
        for ((name, _, old), (_, _, new)) in before.iter().zip(&after) {
            let adapted = name.contains("attn.query.weight") || name.contains("attn.value.weight");
            assert_eq!(adapted, old != new, "{name}");
        }
    }
}
