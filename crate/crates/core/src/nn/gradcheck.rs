//! Central finite-difference verification of analytic gradients.

use super::{ParamKind, Parameters, Scalar, Tensor};

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn merge(mut self, other: &GradCheckReport) -> GradCheckReport {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.tolerance = self.tolerance.min(other.tolerance);
        self.passed = self.max_rel_err <= self.tolerance;
        self
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `analytic` against `(f(x+h e_i) - f(x-h e_i)) / 2h` on every coordinate.
pub fn grad_check(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, analytic, &all, h, tol)
}

/// Like [`grad_check`] but probes only the listed coordinates.
pub fn grad_check_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: 0,
        tolerance: tol,
        passed: true,
    };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_err = report.max_abs_err.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_err <= tol;
    report
}

/// `sum(t * proj)`: turns a tensor output into a scalar with a non-trivial gradient.
pub fn scalarize<S: Scalar>(t: &Tensor<S>, proj: &Tensor<S>) -> f64 {
    assert_eq!(t.len(), proj.len());
    t.data().iter().zip(proj.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

/// All trainable parameters of a model, flattened in visit order.
pub fn flatten_weights<S: Scalar>(model: &mut impl Parameters<S>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Weight {
            out.extend(t.data().iter().map(|v| v.as_f64()));
        }
    });
    out
}

/// Gradients matching [`flatten_weights`]; missing gradients read as zero.
pub fn flatten_grads<S: Scalar>(model: &mut impl Parameters<S>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Weight {
            match t.grad() {
                Some(g) => out.extend(g.iter().map(|v| v.as_f64())),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
    });
    out
}

/// Writes a vector produced by [`flatten_weights`] back into the model.
pub fn load_weights<S: Scalar>(model: &mut impl Parameters<S>, values: &[f64]) {
    let mut at = 0;
    model.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Weight {
            for v in t.data_mut() {
                *v = S::from_f64_lossy(values[at]);
                at += 1;
            }
        }
    });
    assert_eq!(at, values.len(), "weight vector length mismatch");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|v| v[0] * v[0], &[3.0], &[6.0], 1e-6, 1e-8);
        assert!(r.passed, "{r:?}");
        assert!(r.max_abs_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(|v| v[0] * v[0] + v[1], &[3.0, 1.0], &[6.0, 2.0], 1e-6, 1e-4);
        assert!(!r.passed);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn relu_away_from_kink() {
        let xs = [-2.0, 0.5, 3.0];
        let grads: Vec<f64> = xs.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let r = grad_check(|v| v.iter().map(|&x: &f64| x.max(0.0)).sum(), &xs, &grads, 1e-6, 1e-6);
        assert!(r.passed, "{r:?}");
    }
}
