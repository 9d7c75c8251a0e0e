//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function; it never looks at
//! the tape, so it stays independent of the reverse sweep it validates.

use crate::tensor::Tensor;

/// Outcome of a gradient check over every scalar slot of a set of tensors.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` against central differences of `loss`.
///
/// `loss(tensors)` evaluates the scalar objective; slot `(t, k)` is perturbed
/// by `±h`. A slot passes when the relative error is below `rel_tol` or the
/// absolute error is below `abs_tol`. `skip` may veto slots (for example
/// ones sitting on a ReLU kink); vetoed slots are counted but not compared.
pub fn check<F, S>(
    names: &[String],
    point: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    mut loss: F,
    mut skip: S,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> f64,
    S: FnMut(&[Tensor], usize, usize) -> bool,
{
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor> = point.to_vec();
    for t in 0..point.len() {
        for k in 0..point[t].len() {
            if skip(point, t, k) {
                report.skipped += 1;
                continue;
            }
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let up = loss(&work);
            work[t].data_mut()[k] = orig - h;
            let down = loss(&work);
            work[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            if abs > abs_tol {
                report.worst_rel = report.worst_rel.max(rel);
            }
            report.worst_abs = report.worst_abs.max(abs);
            if rel >= rel_tol && abs >= abs_tol {
                report.failures.push(format!(
                    "{}[{k}]: analytic {a:.6e} numeric {numeric:.6e} rel {rel:.3e}",
                    names.get(t).map(String::as_str).unwrap_or("?")
                ));
            }
        }
    }
    report
}
