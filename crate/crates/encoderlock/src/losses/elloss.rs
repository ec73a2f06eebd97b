//! The log-ratio regularizer and its total.
//!
//! `L_el = L_S + R_T` with `R_T = ln(1 + α·L_S/L_T)` (natural log
//! throughout). The ratio form keeps the regularizer gentle when the
//! source loss is already small — `L_S = 0` switches it off exactly —
//! while a collapsing target loss blows `R_T` up, which is the intended
//! pressure.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::Serialize;

/// Target losses at or below this floor are clamped and flagged: the
/// regularizer is intentionally huge as `L_T -> 0`, but must stay finite.
pub const L_TARGET_FLOOR: f64 = 1e-8;

/// One evaluated lock loss (supervised or contrastive inputs).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBundle<F> {
    pub l_source: F,
    /// Target loss as used (clamped to the floor when `saturated`).
    pub l_target: F,
    pub alpha: F,
    pub r_target: F,
    pub l_el: F,
    /// True when `l_target` hit the floor.
    pub saturated: bool,
}

fn el_loss_impl<F: Scalar>(l_source: F, l_target: F, alpha: F, what: &str) -> Result<LossBundle<F>> {
    if !l_source.is_finite() || !l_target.is_finite() || !alpha.is_finite() {
        return Err(Error::numeric(format!("non-finite input to {what}")));
    }
    if l_source < F::zero() {
        return Err(Error::validation(format!("{what}: source loss must be nonnegative")));
    }
    if alpha < F::zero() {
        return Err(Error::validation(format!("{what}: alpha must be nonnegative")));
    }
    let floor = F::from_f64(L_TARGET_FLOOR);
    let (l_target, saturated) = if l_target <= floor {
        (floor, true)
    } else {
        (l_target, false)
    };
    let r_target = (F::one() + alpha * l_source / l_target).ln();
    let l_el = l_source + r_target;
    Ok(LossBundle {
        l_source,
        l_target,
        alpha,
        r_target,
        l_el,
        saturated,
    })
}

/// Evaluate `L_el` on supervised (cross-entropy) losses.
pub fn el_loss<F: Scalar>(l_source: F, l_target: F, alpha: F) -> Result<LossBundle<F>> {
    el_loss_impl(l_source, l_target, alpha, "el_loss")
}

/// Same contract with contrastive losses as inputs.
pub fn el_loss_contrastive<F: Scalar>(
    l_source_cont: F,
    l_target_cont: F,
    alpha: F,
) -> Result<LossBundle<F>> {
    el_loss_impl(l_source_cont, l_target_cont, alpha, "el_loss_contrastive")
}

/// Analytic partials `(∂L_el/∂L_S, ∂L_el/∂L_T)` at an unsaturated point.
///
/// When the bundle is saturated the target loss is a clamped constant and
/// its partial is zero.
pub fn el_loss_partials<F: Scalar>(bundle: &LossBundle<F>) -> (F, F) {
    let ls = bundle.l_source;
    let lt = bundle.l_target;
    let a = bundle.alpha;
    let d_ls = F::one() + a / (lt + a * ls);
    let d_lt = if bundle.saturated {
        F::zero()
    } else {
        -(a * ls) / (lt * (lt + a * ls))
    };
    (d_ls, d_lt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_zero_turns_regularizer_off() {
        let b = el_loss(1.7f64, 0.4, 0.0).unwrap();
        assert_eq!(b.r_target, 0.0);
        assert_eq!(b.l_el, 1.7);
    }

    #[test]
    fn zero_source_loss_gives_zero_total() {
        let b = el_loss(0.0f64, 0.5, 1000.0).unwrap();
        assert_eq!(b.r_target, 0.0);
        assert_eq!(b.l_el, 0.0);
    }

    #[test]
    fn hand_arithmetic_fixture() {
        // 1 + ln(1 + 1000 * 1/2) = 1 + ln(501)
        let b = el_loss(1.0f64, 2.0, 1000.0).unwrap();
        assert!((b.l_el - 7.216606).abs() < 1e-5, "got {}", b.l_el);
        assert!(!b.saturated);
    }

    #[test]
    fn contrastive_fixture_and_ratio_invariance() {
        // 0.5 + ln(1 + 10 * 2) = 0.5 + ln 21
        let b = el_loss_contrastive(0.5f64, 0.25, 10.0).unwrap();
        assert!((b.l_el - 3.544522).abs() < 1e-5);
        // equal losses: r_target = ln 11 at any magnitude
        for &m in &[0.01f64, 1.0, 250.0] {
            let b = el_loss_contrastive(m, m, 10.0).unwrap();
            assert!((b.r_target - 11f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn floor_clamps_and_flags() {
        let b = el_loss(1.0f64, 0.0, 10.0).unwrap();
        assert!(b.saturated);
        assert_eq!(b.l_target, L_TARGET_FLOOR);
        assert!(b.r_target > 19.0); // ln(1 + 10/1e-8) ~ ln(1e9)
        let b2 = el_loss(1.0f64, -3.0, 10.0).unwrap();
        assert!(b2.saturated);
    }

    #[test]
    fn monotone_decreasing_in_target_loss() {
        // the mechanism by which a stronger challenger raises L_el
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let lt = i as f64 * 0.05;
            let b = el_loss(1.0f64, lt, 50.0).unwrap();
            assert!(b.l_el < prev, "not strictly decreasing at L_T={lt}");
            prev = b.l_el;
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let eps = 1e-7;
        for &(ls, lt, a) in &[(1.0f64, 2.0, 1000.0), (0.3, 0.7, 10.0), (2.5, 0.2, 1.0)] {
            let b = el_loss(ls, lt, a).unwrap();
            let (dls, dlt) = el_loss_partials(&b);
            let up = el_loss(ls + eps, lt, a).unwrap().l_el;
            let dn = el_loss(ls - eps, lt, a).unwrap().l_el;
            assert!(((up - dn) / (2.0 * eps) - dls).abs() < 1e-5);
            let up = el_loss(ls, lt + eps, a).unwrap().l_el;
            let dn = el_loss(ls, lt - eps, a).unwrap().l_el;
            assert!(((up - dn) / (2.0 * eps) - dlt).abs() < 1e-5);
        }
    }

    #[test]
    fn invariants_hold() {
        let b = el_loss(0.8f64, 1.3, 7.0).unwrap();
        assert_eq!(b.l_el, b.l_source + b.r_target);
        assert!(b.r_target >= 0.0);
        let expect = (1.0 + 7.0 * 0.8 / 1.3f64).ln();
        assert!((b.r_target - expect).abs() < 1e-15);
    }
}
