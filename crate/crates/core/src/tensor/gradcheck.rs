use super::{no_grad, precision_scope, Precision, Tensor};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Relative errors below this magnitude floor are measured against the
/// floor, so coordinates with vanishing gradient do not blow up the ratio.
const REL_FLOOR: f64 = 1e-6;

/// Compares autodiff gradients of a scalar function with central differences
/// `(f(w+h) - f(w-h)) / 2h`, coordinate by coordinate, in 64-bit mode.
///
/// `f` must rebuild its graph from the current values of `params` on every
/// call. Parameter values are restored exactly after each probe.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let _mode = precision_scope(Precision::F64);
    for p in params {
        p.zero_grad();
        if !p.requires_grad() {
            return Err(Error::Usage("grad_check parameter does not require grad".into()));
        }
    }
    let root = f()?;
    root.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let _ng = no_grad();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let plus = f()?.item();
            p.data_mut()[i] = orig - h;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (pi, i);
            }
        }
    }
    Ok(report)
}
