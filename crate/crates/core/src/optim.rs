//! Optimizers and learning-rate schedules: SGD with momentum under a
//! warmup-cosine schedule, the SAM wrapper with a single ascent step, and
//! AdamwState for decoder training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{round_val, Tensor};

/// Learning rate as a function of the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup to `peak_lr`, then cosine decay to 0 at `total_steps`.
    WarmupCosine {
        peak_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Schedule> {
        if warmup_steps > total_steps || !(peak_lr >= 0.0) {
            return Err(Error::Parameter(format!(
                "bad schedule: peak {peak_lr}, warmup {warmup_steps}, total {total_steps}"
            )));
        }
        Ok(Schedule::WarmupCosine {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn constant(lr: f64) -> Schedule {
        Schedule::Constant { lr }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        match *self {
            Schedule::Constant { lr } => Ok(lr),
            Schedule::WarmupCosine {
                peak_lr,
                warmup_steps,
                total_steps,
            } => {
                if step > total_steps {
                    return Err(Error::Parameter(format!("step {step} beyond schedule end {total_steps}")));
                }
                if step < warmup_steps {
                    return Ok(peak_lr * step as f64 / warmup_steps as f64);
                }
                if total_steps == warmup_steps {
                    return Ok(peak_lr);
                }
                let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
                Ok(0.5 * peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }
}

fn collect_grads(params: &[Param]) -> Result<Vec<Vec<f64>>> {
    params
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .ok_or_else(|| Error::Usage(format!("parameter {} has no gradient", p.name)))
        })
        .collect()
}

fn zero_grads(params: &[Param]) {
    for p in params {
        p.tensor.zero_grad();
    }
}

fn check_finite(loss: &Tensor) -> Result<f64> {
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v ← μ·v + g + wd·w`, `w ← w − lr(step)·v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(schedule: Schedule, momentum: f64, weight_decay: f64) -> Result<SgdState> {
        if weight_decay < 0.0 || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "momentum {momentum} must be in [0, 1) and weight decay {weight_decay} non-negative"
            )));
        }
        Ok(SgdState {
            schedule,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update from the gradients currently stored on `params`.
    pub fn step(&mut self, params: &[Param], step: usize) -> Result<()> {
        let grads = collect_grads(params)?;
        self.step_with_grads(params, &grads, step)
    }

    pub fn step_with_grads(&mut self, params: &[Param], grads: &[Vec<f64>], step: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Usage(format!("{} grads for {} params", grads.len(), params.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage("parameter set changed between steps".into()));
        }
        let lr = self.schedule.lr_at(step)?;
        for ((p, g), v) in params.iter().zip(grads).zip(self.velocity.iter_mut()) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let mut w = p.tensor.data_mut();
            if g.len() != w.len() || v.len() != w.len() {
                return Err(Error::shape("sgd", &[w.len()], &[g.len()]));
            }
            for i in 0..w.len() {
                v[i] = round_val(self.momentum * v[i] + g[i] + wd * w[i]);
                w[i] = round_val(w[i] - lr * v[i]);
            }
        }
        Ok(())
    }
}

/// Evaluates `loss_fn`, backpropagates and applies one SGD update.
/// Returns the loss before the update.
pub fn sgd_step<F>(opt: &mut SgdState, params: &[Param], step: usize, mut loss_fn: F) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    zero_grads(params);
    let loss = loss_fn()?;
    let value = check_finite(&loss)?;
    loss.backward()?;
    let grads = collect_grads(params)?;
    zero_grads(params);
    opt.step_with_grads(params, &grads, step)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    /// Radius of the ascent ball; 0 disables the perturbation.
    pub rho: f64,
}

/// Below this gradient norm the ascent step is skipped.
pub const SAM_MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct SamStepInfo {
    pub loss: f64,
    /// L2 norm of the perturbation actually added to the parameters.
    pub perturbation_norm: f64,
}

/// One SAM update: `g₁ = ∇L(w)`, `Δ = ρ·g₁/‖g₁‖` over all parameters jointly,
/// `g₂ = ∇L(w+Δ)`, then restore `w` and let the base optimizer apply `g₂`.
/// `loss_fn` must evaluate the same batch on both calls.
pub fn sam_step<F>(sam: &SamConfig, base: &mut SgdState, params: &[Param], step: usize, mut loss_fn: F) -> Result<SamStepInfo>
where
    F: FnMut() -> Result<Tensor>,
{
    if !(sam.rho >= 0.0) {
        return Err(Error::Parameter(format!("SAM radius must be non-negative, got {}", sam.rho)));
    }
    zero_grads(params);
    let loss = loss_fn()?;
    let value = check_finite(&loss)?;
    loss.backward()?;
    let g1 = collect_grads(params)?;
    zero_grads(params);

    let norm = g1.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if sam.rho == 0.0 || norm < SAM_MIN_GRAD_NORM {
        base.step_with_grads(params, &g1, step)?;
        return Ok(SamStepInfo {
            loss: value,
            perturbation_norm: 0.0,
        });
    }

    let originals: Vec<Vec<f64>> = params.iter().map(|p| p.tensor.to_vec()).collect();
    let scale = sam.rho / norm;
    let mut applied_sq = 0.0;
    for ((p, g), orig) in params.iter().zip(&g1).zip(&originals) {
        let mut w = p.tensor.data_mut();
        for i in 0..w.len() {
            w[i] = round_val(orig[i] + scale * g[i]);
            let d = w[i] - orig[i];
            applied_sq += d * d;
        }
    }

    let ascent = loss_fn().and_then(|l| {
        check_finite(&l)?;
        l.backward()?;
        collect_grads(params)
    });
    for (p, orig) in params.iter().zip(originals) {
        *p.tensor.data_mut() = orig;
    }
    zero_grads(params);
    let g2 = ascent?;
    base.step_with_grads(params, &g2, step)?;
    Ok(SamStepInfo {
        loss: value,
        perturbation_norm: applied_sq.sqrt(),
    })
}

/// AdamwState with decoupled weight decay and per-step bias correction.
#[derive(Debug, Clone)]
pub struct AdamwState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Default for AdamwState {
    fn default() -> Self {
        AdamwState {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl AdamwState {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        let grads = collect_grads(params)?;
        self.step_with_grads(params, &grads)
    }

    pub fn step_with_grads(&mut self, params: &[Param], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Usage(format!("{} grads for {} params", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut w = p.tensor.data_mut();
            for j in 0..w.len() {
                m[j] = round_val(self.beta1 * m[j] + (1.0 - self.beta1) * g[j]);
                v[j] = round_val(self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j]);
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let decayed = w[j] * (1.0 - self.lr * wd);
                w[j] = round_val(decayed - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{precision_scope, Precision};

    fn param(values: &[f64], decay: bool) -> Param {
        Param {
            name: "w".into(),
            tensor: Tensor::param(values.to_vec(), &[values.len()]).unwrap(),
            decay,
        }
    }

    fn half_square(p: &Param) -> Result<Tensor> {
        Ok(p.tensor.mul(&p.tensor)?.sum().scale(0.5))
    }

    #[test]
    fn sgd_examples() {
        let _m = precision_scope(Precision::F64);
        let p = param(&[1.0], true);
        let mut opt = SgdState::new(Schedule::constant(0.1), 0.0, 0.0).unwrap();
        opt.step_with_grads(&[p.clone()], &[vec![2.0]], 0).unwrap();
        assert!((p.tensor.item() - 0.8).abs() < 1e-15);

        let q = param(&[0.3, -0.2], true);
        let mut opt = SgdState::new(Schedule::constant(0.5), 0.0, 0.0).unwrap();
        opt.step_with_grads(&[q.clone()], &[vec![0.0, 0.0]], 0).unwrap();
        assert_eq!(q.tensor.to_vec(), vec![0.3, -0.2]);

        let r = param(&[0.0], true);
        let mut opt = SgdState::new(Schedule::constant(1.0), 0.9, 0.0).unwrap();
        opt.step_with_grads(&[r.clone()], &[vec![1.0]], 0).unwrap();
        opt.step_with_grads(&[r.clone()], &[vec![1.0]], 1).unwrap();
        assert!((r.tensor.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_missing_grad_is_usage_error() {
        let p = param(&[1.0], true);
        let mut opt = SgdState::new(Schedule::constant(0.1), 0.0, 0.0).unwrap();
        assert!(matches!(opt.step(&[p], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn decay_skips_flagged_params() {
        let _m = precision_scope(Precision::F64);
        let w = param(&[1.0], true);
        let b = param(&[1.0], false);
        let mut opt = SgdState::new(Schedule::constant(0.1), 0.0, 0.5).unwrap();
        opt.step_with_grads(&[w.clone(), b.clone()], &[vec![0.0], vec![0.0]], 0).unwrap();
        assert!((w.tensor.item() - 0.95).abs() < 1e-15);
        assert_eq!(b.tensor.item(), 1.0);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(0.3, 10, 110).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(5).unwrap(), 0.15);
        assert_eq!(s.lr_at(10).unwrap(), 0.3);
        assert!(s.lr_at(110).unwrap().abs() < 1e-15);
        assert!((s.lr_at(60).unwrap() - 0.15).abs() < 1e-9);
        assert!(matches!(s.lr_at(111), Err(Error::Parameter(_))));
        assert!(Schedule::new(0.1, 20, 10).is_err());
    }

    #[test]
    fn sam_one_dimensional_example() {
        let _m = precision_scope(Precision::F64);
        let eta = 0.05;
        let p = param(&[1.0], true);
        let mut opt = SgdState::new(Schedule::constant(eta), 0.0, 0.0).unwrap();
        let info = sam_step(&SamConfig { rho: 0.1 }, &mut opt, &[p.clone()], 0, || half_square(&p)).unwrap();
        assert!((info.perturbation_norm - 0.1).abs() < 1e-12);
        assert!((p.tensor.item() - (1.0 - 1.1 * eta)).abs() < 1e-12);
    }

    #[test]
    fn sam_perturbation_direction() {
        let _m = precision_scope(Precision::F64);
        // L = 3a + 4b has gradient (3, 4) everywhere.
        let p = param(&[0.0, 0.0], true);
        let coeff = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let seen = std::cell::RefCell::new(Vec::new());
        let mut opt = SgdState::new(Schedule::constant(0.0), 0.0, 0.0).unwrap();
        sam_step(&SamConfig { rho: 0.5 }, &mut opt, &[p.clone()], 0, || {
            seen.borrow_mut().push(p.tensor.to_vec());
            Ok(p.tensor.mul(&coeff)?.sum())
        })
        .unwrap();
        let seen = seen.into_inner();
        assert!((seen[1][0] - 0.3).abs() < 1e-12 && (seen[1][1] - 0.4).abs() < 1e-12);
        assert_eq!(p.tensor.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn sam_with_zero_radius_equals_sgd() {
        let a = param(&[0.7, -1.3, 0.2], true);
        let b = param(&[0.7, -1.3, 0.2], true);
        let target = Tensor::new(vec![0.1, 0.5, -0.4], &[3]).unwrap();
        let loss = |p: &Param| -> Result<Tensor> {
            let d = p.tensor.sub(&target)?;
            Ok(d.mul(&d)?.relu().sum())
        };
        let mut oa = SgdState::new(Schedule::new(0.2, 2, 10).unwrap(), 0.9, 1e-4).unwrap();
        let mut ob = oa.clone();
        for step in 0..6 {
            sam_step(&SamConfig { rho: 0.0 }, &mut oa, &[a.clone()], step, || loss(&a)).unwrap();
            sgd_step(&mut ob, &[b.clone()], step, || loss(&b)).unwrap();
        }
        let bits = |p: &Param| p.tensor.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn sam_skips_ascent_at_critical_point() {
        let p = param(&[0.0], true);
        let mut opt = SgdState::new(Schedule::constant(0.1), 0.0, 0.0).unwrap();
        let info = sam_step(&SamConfig { rho: 0.5 }, &mut opt, &[p.clone()], 0, || half_square(&p)).unwrap();
        assert_eq!(info.perturbation_norm, 0.0);
        assert_eq!(p.tensor.item(), 0.0);
    }

    #[test]
    fn sam_rejects_non_finite_loss() {
        let p = param(&[1.0], true);
        let mut opt = SgdState::new(Schedule::constant(0.1), 0.0, 0.0).unwrap();
        let err = sam_step(&SamConfig { rho: 0.1 }, &mut opt, &[p.clone()], 0, || {
            Ok(p.tensor.scale(f64::INFINITY).sum())
        })
        .unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(p.tensor.item(), 1.0);
    }

    #[test]
    fn sam_matches_closed_form_iteration_on_quadratic() {
        let _m = precision_scope(Precision::F64);
        // L(w) = ½ wᵀ A w − bᵀ w with A = diag(1, 4).
        let a_diag: [f64; 2] = [1.0, 4.0];
        let b_vec = [1.0, -2.0];
        let (eta, rho) = (0.1, 0.05);

        let mut oracle: [f64; 2] = [0.5, 0.5];
        for _ in 0..50 {
            let g = [a_diag[0] * oracle[0] - b_vec[0], a_diag[1] * oracle[1] - b_vec[1]];
            let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
            let wp = [oracle[0] + rho * g[0] / n, oracle[1] + rho * g[1] / n];
            let g2 = [a_diag[0] * wp[0] - b_vec[0], a_diag[1] * wp[1] - b_vec[1]];
            oracle = [oracle[0] - eta * g2[0], oracle[1] - eta * g2[1]];
        }

        let p = param(&[0.5, 0.5], true);
        let at = Tensor::new(a_diag.to_vec(), &[2]).unwrap();
        let bt = Tensor::new(b_vec.to_vec(), &[2]).unwrap();
        let mut opt = SgdState::new(Schedule::constant(eta), 0.0, 0.0).unwrap();
        for step in 0..50 {
            sam_step(&SamConfig { rho }, &mut opt, &[p.clone()], step, || {
                let quad = p.tensor.mul(&p.tensor)?.mul(&at)?.sum().scale(0.5);
                quad.sub(&p.tensor.mul(&bt)?.sum())
            })
            .unwrap();
        }
        let got = p.tensor.to_vec();
        assert!((got[0] - oracle[0]).abs() < 1e-9 && (got[1] - oracle[1]).abs() < 1e-9);
        // SAM settles near, but not on, the minimizer (1, -0.5).
        assert!((got[0] - 1.0).abs() < 0.1 && (got[1] + 0.5).abs() < 0.1);
    }

    #[test]
    fn adamw_examples() {
        let _m = precision_scope(Precision::F64);
        let p = param(&[2.0], true);
        let mut opt = AdamwState::default();
        opt.step_with_grads(&[p.clone()], &[vec![0.0]]).unwrap();
        assert!((p.tensor.item() - 2.0 * (1.0 - 0.001 * 1e-4)).abs() < 1e-15);

        let q = param(&[0.0], true);
        let mut opt = AdamwState::default();
        opt.step_with_grads(&[q.clone()], &[vec![1.0]]).unwrap();
        assert!((q.tensor.item() + 0.001).abs() < 1e-9);

        let a = param(&[0.3, 0.1], true);
        let b = param(&[0.3, 0.1], true);
        let (mut oa, mut ob) = (AdamwState::default(), AdamwState::default());
        for k in 0..5 {
            let g = vec![0.1 * k as f64, -0.2];
            oa.step_with_grads(&[a.clone()], &[g.clone()]).unwrap();
            ob.step_with_grads(&[b.clone()], &[g]).unwrap();
        }
        assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
    }
}
