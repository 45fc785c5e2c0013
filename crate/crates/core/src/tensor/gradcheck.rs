//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep over one parameter vector.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares `analytic_grad` against central differences of `f` at `params`.
///
/// `f` must be deterministic. Each parameter is perturbed by `±h` in f32;
/// the divided difference uses the actually realized perturbation so the
/// check stays accurate when `params[i] + h` rounds. The relative error
/// denominator is floored at 1e-3 to keep near-zero gradient pairs from
/// dominating the report.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[f32]) -> f64,
    params: &[f32],
    analytic_grad: &[f32],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if params.len() != analytic_grad.len() {
        return Err(Error::invalid_argument(format!(
            "gradcheck: {} params vs {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::invalid_argument(format!("gradcheck: h must be positive, got {h}")));
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tol,
    };

    for i in 0..params.len() {
        let p0 = f64::from(params[i]);
        let plus = (p0 + h) as f32;
        let minus = (p0 - h) as f32;

        work[i] = plus;
        let f_plus = f(&work);
        work[i] = minus;
        let f_minus = f(&work);
        work[i] = params[i];

        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradcheck: f evaluated to {f_plus} / {f_minus} at parameter {i}"
            )));
        }

        let span = f64::from(plus) - f64::from(minus);
        let numeric = (f_plus - f_minus) / span;
        let analytic = f64::from(analytic_grad[i]);
        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut f = |p: &[f32]| f64::from(p[0]) * f64::from(p[0]);
        let report = finite_difference_check(&mut f, &[3.0], &[6.0], 1e-3, 1e-6).unwrap();
        assert!(report.pass(), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut f = |p: &[f32]| f64::from(p[0]) * f64::from(p[0]);
        // deliberately off by 2x
        let report = finite_difference_check(&mut f, &[3.0], &[12.0], 1e-3, 1e-3).unwrap();
        assert!(!report.pass());
    }

    #[test]
    fn non_finite_is_diagnosed() {
        let mut f = |p: &[f32]| if p[0] > 1.0 { f64::NAN } else { 0.0 };
        let err = finite_difference_check(&mut f, &[1.0], &[0.0], 1e-3, 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
