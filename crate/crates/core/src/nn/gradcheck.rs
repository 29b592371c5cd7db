/// Central-difference step used by every gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error uses `max(|analytic| + |numeric|, floor)` as denominator.
/// Central differences at step 1e-5 carry about 1e-9 of round-off in `f64`, so
/// gradients below the floor are judged on absolute error `tolerance · floor`.
pub const DENOMINATOR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compare `analytic` against central differences of `loss` at `params`.
pub fn grad_check(loss: impl Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64], step: f64) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        n_params: params.len(),
        max_relative_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOMINATOR_FLOOR);
        if rel > report.max_relative_error || !rel.is_finite() {
            report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_corrupted_gradients() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let p: [f64; 2] = [0.7, -1.3];
        let g: [f64; 2] = [2.0 * p[0] * p[1], p[0] * p[0] + p[1].cos()];
        assert!(grad_check(f, &p, &g, GRAD_CHECK_STEP).passes(1e-4));
        let bad = [g[0] * 2.0, g[1]];
        let r = grad_check(f, &p, &bad, GRAD_CHECK_STEP);
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let r = grad_check(|_| 3.0, &[1.0, 2.0], &[0.0, 0.0], GRAD_CHECK_STEP);
        assert_eq!(r.max_relative_error, 0.0);
    }
}
