//! Scalar loss kernels used by the detection objective.

use super::Scalar;

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Two-way softmax over `(neg, pos)` logits; returns `(p_neg, p_pos)`.
pub fn softmax2<S: Scalar>(neg: S, pos: S) -> (S, S) {
    let p_pos = sigmoid(pos - neg);
    (S::one() - p_pos, p_pos)
}

/// Binary cross entropy of a probability against a 0/1 target.
pub fn bce<S: Scalar>(p: S, target: S) -> S {
    -(target * p.ln() + (S::one() - target) * (S::one() - p).ln())
}

/// Binary cross entropy evaluated from the logit of `p`, stable for large `|z|`.
/// Returns the loss and its derivative with respect to `z`.
pub fn bce_with_logit<S: Scalar>(z: S, target: S) -> (S, S) {
    let loss = z.max(S::zero()) - z * target + (S::one() + (-z.abs()).exp()).ln();
    (loss, sigmoid(z) - target)
}

/// SmoothL1 with unit threshold on one residual; returns value and derivative.
pub fn smooth_l1_scalar<S: Scalar>(d: S) -> (S, S) {
    let half = S::from_f64_lossy(0.5);
    if d.abs() < S::one() {
        (half * d * d, d)
    } else {
        (d.abs() - half, d.signum())
    }
}

/// Sum of SmoothL1 over the residuals `u - target`; returns value and `d/du`.
pub fn smooth_l1<S: Scalar>(u: &[S], target: &[S]) -> (S, Vec<S>) {
    assert_eq!(u.len(), target.len());
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(u.len());
    for (&a, &b) in u.iter().zip(target) {
        let (v, g) = smooth_l1_scalar(a - b);
        total += v;
        grad.push(g);
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;

    #[test]
    fn smooth_l1_reference_values() {
        assert_eq!(smooth_l1(&[1.0f64, 2.0], &[1.0, 2.0]).0, 0.0);
        let (v, _) = smooth_l1(&[1.0f64; 7], &[0.0; 7]);
        assert!((v - 3.5).abs() < 1e-12);
        assert_eq!(smooth_l1_scalar(3.0f64).0, 2.5);
        assert_eq!(smooth_l1_scalar(-0.5f64).0, 0.125);
    }

    #[test]
    fn softmax2_sums_to_one() {
        for &(a, b) in &[(0.0f64, 0.0), (3.0, -2.0), (-40.0, 40.0), (1e-3, 7.5)] {
            let (p0, p1) = softmax2(a, b);
            assert!((p0 + p1 - 1.0).abs() < 1e-12);
        }
        assert_eq!(softmax2(0.0f64, 0.0).1, 0.5);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        assert!((bce(0.5f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logit(0.0f64, 0.0).0 - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for &z in &[-5.0f64, -0.3, 0.0, 0.7, 6.0] {
            for &t in &[0.0, 1.0] {
                let direct = bce(sigmoid(z), t);
                assert!((bce_with_logit(z, t).0 - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let zs = [-3.0, -0.2, 0.4, 2.5];
        let grads: Vec<f64> = zs.iter().map(|&z| bce_with_logit(z, 1.0).1).collect();
        let r = grad_check(|v| v.iter().map(|&z| bce_with_logit(z, 1.0).0).sum(), &zs, &grads, 1e-6, 1e-6);
        assert!(r.passed, "{r:?}");

        let u = [-2.0, -0.5, 0.3, 1.7, 0.9, -1.2, 4.0];
        let target = [0.0; 7];
        let (_, g) = smooth_l1(&u, &target);
        let r = grad_check(|v| smooth_l1(v, &target).0, &u, &g, 1e-6, 1e-6);
        assert!(r.passed, "{r:?}");
    }
}
