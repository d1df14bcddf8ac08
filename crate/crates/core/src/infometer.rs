//! Decoder-based mutual information proxy: how well can a small decoder
//! rebuild the input pixels from a model's last-layer CLS features?
//!
//! The proxy is the negative held-out binary cross-entropy per pixel, so a
//! higher value means the features kept more information about the input.
//! Values are only comparable between feature spaces of the same width.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{csv_error, vit_accuracy, BatchStream};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, uniform, Linear, Param, ReMemConfig, VitModel};
use crate::optim::AdamwState;
use crate::rng::{rng_for, Rng};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub hidden: usize,
    /// Fraction of the evaluation set held out for the reconstruction loss.
    pub holdout: f64,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            updates: 2000,
            batch_size: 64,
            hidden: 256,
            holdout: 0.2,
        }
    }
}

/// `features → hidden → relu → pixels → sigmoid`.
#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DecoderModel {
    pub fn new(d_in: usize, hidden: usize, pixels: usize, rng: &mut Rng) -> Result<DecoderModel> {
        if d_in == 0 || hidden == 0 || pixels == 0 {
            return Err(Error::Parameter("decoder dimensions must be positive".into()));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let fc1 = Linear {
            weight: Tensor::param(uniform(rng, d_in * hidden, bound), &[d_in, hidden])?,
            bias: Tensor::param(vec![0.0; hidden], &[hidden])?,
        };
        // Small output weights start every pixel near 0.5.
        let fc2 = Linear {
            weight: Tensor::param(trunc_normal(rng, hidden * pixels, 0.02), &[hidden, pixels])?,
            bias: Tensor::param(vec![0.0; pixels], &[pixels])?,
        };
        Ok(DecoderModel { fc1, fc2 })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(features)?.relu();
        Ok(self.fc2.forward(&h)?.sigmoid())
    }

    pub fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::with_capacity(4);
        for (name, l) in [("fc1", &self.fc1), ("fc2", &self.fc2)] {
            out.push(Param {
                name: format!("{name}.weight"),
                tensor: l.weight.clone(),
                decay: true,
            });
            out.push(Param {
                name: format!("{name}.bias"),
                tensor: l.bias.clone(),
                decay: false,
            });
        }
        out
    }

    /// Mean per-pixel BCE over the given rows, off the tape.
    pub fn loss(&self, features: &Tensor, images: &Tensor) -> Result<f64> {
        let _g = no_grad();
        Ok(self.forward(features)?.bce(images)?.item())
    }
}

fn check_pair(features: &Tensor, images: &Tensor) -> Result<(usize, usize, usize)> {
    let (fs, is) = (features.shape(), images.shape());
    if fs.len() != 2 || is.len() != 2 || fs[0] != is[0] {
        return Err(Error::shape("decoder", fs, is));
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("pixel {v} outside [0, 1]")));
    }
    Ok((fs[0], fs[1], is[1]))
}

/// Trains a decoder with AdamW on mean per-pixel BCE. When there are fewer
/// rows than the batch size every update uses the full set.
pub fn train_decoder(features: &Tensor, images: &Tensor, cfg: &MiConfig, seed: u64) -> Result<DecoderModel> {
    let (n, d, pixels) = check_pair(features, images)?;
    if n == 0 || cfg.batch_size == 0 {
        return Err(Error::Parameter("decoder training needs rows and a positive batch size".into()));
    }
    let features = features.detach();
    let images = images.detach();
    let mut rng = rng_for(seed, "decoder-init");
    let decoder = DecoderModel::new(d, cfg.hidden, pixels, &mut rng)?;
    let params = decoder.parameters();
    let mut opt = AdamwState::default();
    let full = n <= cfg.batch_size;
    let mut batches = BatchStream::new(n, cfg.batch_size, rng_for(seed, "decoder-batches"));
    for _ in 0..cfg.updates {
        let (x, y) = if full {
            (features.clone(), images.clone())
        } else {
            let idx = batches.next_batch();
            (features.select_rows(&idx)?, images.select_rows(&idx)?)
        };
        for p in &params {
            p.tensor.zero_grad();
        }
        let loss = decoder.forward(&x)?.bce(&y)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!("decoder loss {}", loss.item())));
        }
        loss.backward()?;
        opt.step(&params)?;
    }
    for p in &params {
        p.tensor.zero_grad();
    }
    Ok(decoder)
}

/// Mean per-pixel BCE of predicting every image in `eval` by the per-pixel
/// mean of `fit`, the best any input-independent decoder can learn.
pub fn mean_image_loss(fit: &[f64], eval: &[f64], pixels: usize) -> f64 {
    let n_fit = (fit.len() / pixels).max(1);
    let mut mean = vec![0.0; pixels];
    for row in fit.chunks(pixels) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_fit as f64);
    let ln = |v: f64| if v <= 0.0 { -100.0 } else { v.ln().max(-100.0) };
    let mut total = 0.0;
    for row in eval.chunks(pixels) {
        for (&m, &t) in mean.iter().zip(row) {
            total -= t * ln(m) + (1.0 - t) * ln(1.0 - m);
        }
    }
    total / eval.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Held-out mean per-pixel BCE in nats.
    pub recon_loss: f64,
    /// `−recon_loss`; higher means more information.
    pub mi_proxy: f64,
    pub baseline_loss: f64,
    pub n_train_updates: usize,
    pub d_embed: usize,
}

impl MiEstimate {
    /// Orders two estimates by `mi_proxy`; refuses feature spaces of
    /// different widths.
    pub fn compare(&self, other: &MiEstimate) -> Result<Ordering> {
        if self.d_embed != other.d_embed {
            return Err(Error::Incomparable(format!(
                "feature widths {} and {} differ",
                self.d_embed, other.d_embed
            )));
        }
        Ok(self.mi_proxy.total_cmp(&other.mi_proxy))
    }
}

/// Splits rows 80/20 (by `cfg.holdout`), trains a decoder on the first part
/// and scores it on the held-out part.
pub fn mi_from_features(features: &Tensor, images: &Tensor, cfg: &MiConfig, seed: u64) -> Result<MiEstimate> {
    let (n, d, pixels) = check_pair(features, images)?;
    if !(0.0..1.0).contains(&cfg.holdout) || n < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 rows and holdout in [0, 1), got {n} rows, holdout {}",
            cfg.holdout
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "mi-split"));
    let n_eval = ((cfg.holdout * n as f64).round() as usize).clamp(1, n - 1);
    let (eval_idx, fit_idx) = order.split_at(n_eval);
    let (fit_x, fit_y) = (features.select_rows(fit_idx)?, images.select_rows(fit_idx)?);
    let (eval_x, eval_y) = (features.select_rows(eval_idx)?, images.select_rows(eval_idx)?);
    let decoder = train_decoder(&fit_x, &fit_y, cfg, seed)?;
    let recon_loss = decoder.loss(&eval_x, &eval_y)?;
    let baseline_loss = mean_image_loss(&fit_y.to_vec(), &eval_y.to_vec(), pixels);
    Ok(MiEstimate {
        recon_loss,
        mi_proxy: -recon_loss,
        baseline_loss,
        n_train_updates: cfg.updates,
        d_embed: d,
    })
}

/// Final-layernorm CLS features of every image, `[N, d_embed]`.
pub fn cls_features(model: &VitModel, remem: &ReMemConfig, dataset: &Dataset) -> Result<Tensor> {
    let _g = no_grad();
    let mut rows = Vec::with_capacity(dataset.len() * model.config.d_embed);
    for chunk in dataset.all_indices().chunks(256) {
        rows.extend(model.forward(remem, &dataset.batch(chunk)?)?.cls_embedding.to_vec());
    }
    Tensor::new(rows, &[dataset.len(), model.config.d_embed])
}

pub fn mi_proxy(model: &VitModel, remem: &ReMemConfig, dataset: &Dataset, cfg: &MiConfig, seed: u64) -> Result<MiEstimate> {
    let features = cls_features(model, remem, dataset)?;
    let images = dataset.flat_batch(&dataset.all_indices())?;
    mi_from_features(&features, &images, cfg, seed)
}

/// One point of the information plane: teacher error against the proxy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfoPlanePoint {
    pub tag: String,
    pub teacher_err: f64,
    pub mi: MiEstimate,
    pub seed: u64,
}

/// `eval` scores the error; `probe` feeds the decoder.
pub fn info_plane_point(
    tag: &str,
    model: &VitModel,
    remem: &ReMemConfig,
    eval: &Dataset,
    probe: &Dataset,
    cfg: &MiConfig,
    seed: u64,
) -> Result<InfoPlanePoint> {
    Ok(InfoPlanePoint {
        tag: tag.to_string(),
        teacher_err: 1.0 - vit_accuracy(model, remem, eval)?,
        mi: mi_proxy(model, remem, probe, cfg, seed)?,
        seed,
    })
}

pub const INFO_PLANE_HEADER: &str = "tag,teacher_err,mi_proxy,baseline_loss,d_embed,seed";

pub fn write_info_plane_csv(path: &Path, points: &[InfoPlanePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(INFO_PLANE_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([
            p.tag.clone(),
            p.teacher_err.to_string(),
            p.mi.mi_proxy.to_string(),
            p.mi.baseline_loss.to_string(),
            p.mi.d_embed.to_string(),
            p.seed.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
