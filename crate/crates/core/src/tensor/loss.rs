use std::rc::Rc;

use super::ops::{clamped_ln, log_softmax_row, softmax_row, Op};
use super::Tensor;
use crate::error::{Error, Result};

/// Scalar losses. Each reduces to a mean over the batch (rows), except
/// [`LossKind::Bce`] which averages over every element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    KlDiv,
    Bce,
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn check_probabilities(name: &str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("{name} value {v} outside [0, 1]")));
    }
    Ok(())
}

impl Tensor {
    /// Mean cross-entropy of `[n, c]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = require_matrix("cross_entropy", self)?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Parameter(format!("label {bad} out of range for {c} classes")));
        }
        let mut logp = self.to_vec();
        for row in logp.chunks_mut(c) {
            log_softmax_row(row, 1.0);
        }
        let loss = -labels.iter().enumerate().map(|(i, &y)| logp[i * c + y]).sum::<f64>() / n as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: Rc::new(labels.to_vec()),
                probs,
            },
        ))
    }

    /// Mean cross-entropy of logits against soft targets (rows of
    /// probabilities), e.g. mixed one-hot labels.
    pub fn soft_cross_entropy(&self, targets: &Tensor) -> Result<Tensor> {
        let (n, c) = require_matrix("soft_cross_entropy", self)?;
        if targets.shape() != self.shape() {
            return Err(Error::shape("soft_cross_entropy", self.shape(), targets.shape()));
        }
        let mut logp = self.to_vec();
        for row in logp.chunks_mut(c) {
            log_softmax_row(row, 1.0);
        }
        let loss = -targets.data().iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>() / n as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            Op::SoftCrossEntropy {
                logits: self.clone(),
                targets: targets.clone(),
                probs,
            },
        ))
    }

    /// KL(self ‖ q) for probability rows, averaged over rows, with 0·ln 0 = 0.
    pub fn kl_div(&self, q: &Tensor) -> Result<Tensor> {
        let (n, _) = require_matrix("kl_div", self)?;
        if q.shape() != self.shape() {
            return Err(Error::shape("kl_div", self.shape(), q.shape()));
        }
        check_probabilities("kl_div p", self)?;
        check_probabilities("kl_div q", q)?;
        let total: f64 = self
            .data()
            .iter()
            .zip(q.data().iter())
            .map(|(&p, &q)| if p > 0.0 { p * (p.ln() - q.ln()) } else { 0.0 })
            .sum();
        Ok(Tensor::from_op(
            vec![total / n as f64],
            vec![1],
            Op::KlDiv {
                p: self.clone(),
                q: q.clone(),
            },
        ))
    }

    /// KL(target ‖ softmax(self / T)) with the student side given as logits,
    /// which keeps the log term finite when probabilities underflow.
    pub fn kl_div_from_logits(&self, target: &Tensor, temperature: f64) -> Result<Tensor> {
        let (n, c) = require_matrix("kl_div_from_logits", self)?;
        if target.shape() != self.shape() {
            return Err(Error::shape("kl_div_from_logits", self.shape(), target.shape()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
        }
        let mut logq = self.to_vec();
        for row in logq.chunks_mut(c) {
            log_softmax_row(row, temperature);
        }
        let total: f64 = target
            .data()
            .iter()
            .zip(&logq)
            .map(|(&p, &lq)| if p > 0.0 { p * (p.ln() - lq) } else { 0.0 })
            .sum();
        let probs = logq.iter().map(|v| v.exp()).collect();
        Ok(Tensor::from_op(
            vec![total / n as f64],
            vec![1],
            Op::KlDivLogits {
                target: target.clone(),
                logits: self.clone(),
                temperature,
                probs,
            },
        ))
    }

    /// Binary cross-entropy averaged over all elements. Logs are clamped at
    /// -100 so saturated predictions stay finite.
    pub fn bce(&self, target: &Tensor) -> Result<Tensor> {
        if target.shape() != self.shape() {
            return Err(Error::shape("bce", self.shape(), target.shape()));
        }
        check_probabilities("bce prediction", self)?;
        check_probabilities("bce target", target)?;
        let total: f64 = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&p, &t)| -(t * clamped_ln(p) + (1.0 - t) * clamped_ln(1.0 - p)))
            .sum();
        Ok(Tensor::from_op(
            vec![total / self.numel() as f64],
            vec![1],
            Op::Bce {
                pred: self.clone(),
                target: target.clone(),
            },
        ))
    }
}

/// Target of a [`loss`] call: integer labels for cross-entropy, a tensor for
/// the other kinds.
pub enum LossTarget<'a> {
    Labels(&'a [usize]),
    Tensor(&'a Tensor),
}

pub fn loss(kind: LossKind, prediction: &Tensor, target: LossTarget<'_>) -> Result<Tensor> {
    match (kind, target) {
        (LossKind::CrossEntropy, LossTarget::Labels(y)) => prediction.cross_entropy(y),
        (LossKind::CrossEntropy, LossTarget::Tensor(t)) => prediction.soft_cross_entropy(t),
        (LossKind::KlDiv, LossTarget::Tensor(t)) => prediction.kl_div(t),
        (LossKind::Bce, LossTarget::Tensor(t)) => prediction.bce(t),
        (kind, LossTarget::Labels(_)) => Err(Error::Usage(format!("{kind:?} needs a tensor target"))),
    }
}

/// Softmax of a plain buffer, outside the tape.
pub fn softmax_values(values: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_row(row, temperature);
    }
    out
}
