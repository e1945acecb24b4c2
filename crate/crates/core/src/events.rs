//! Guard monitoring: sign-change localization inside accepted steps and
//! reset application.
//!
//! Continuous guards are probed on primal values against the dense
//! output of the step; the bracket is narrowed by regula falsi with an
//! Illinois safeguard and a periodic forced bisection, and the crossing
//! is reported at the bracket's right edge so integration resumes on the
//! crossing side. For differentiation, one Newton correction expressed
//! in scalar arithmetic attaches the implicit-function derivative of the
//! event time: t* = τ̂ − g(x(τ̂), τ̂)/ġ with τ̂ and ġ frozen constants.
//! Downstream, the reset map and the `stop − t*` truncated step compose
//! the full jump sensitivity ∂h/∂x·(∂x⁻/∂θ + f⁻·dt*) + ∂h/∂θ − f⁺·dt*
//! through ordinary arithmetic on the tape.

use crate::autodiff::TRANSVERSALITY_THRESHOLD;
use crate::error::SimError;
use crate::integrator::{dense_eval, StepRecord};
use crate::scalar::Scalar;

pub(crate) const EVENT_ITER_CAP: usize = 256;

/// Narrow a sign-change bracket to width `tol` and return its right edge.
pub(crate) fn locate_event_time_raw(
    probe: impl Fn(f64) -> Result<f64, SimError>,
    bracket: (f64, f64),
    g_at: (f64, f64),
    tol: f64,
    cap: usize,
    guard: usize,
) -> Result<f64, SimError> {
    let (mut lo, mut hi) = bracket;
    let (mut glo, mut ghi) = g_at;
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    if glo.signum() == ghi.signum() {
        return Err(SimError::NoSignChange { guard, t0: lo, t1: hi });
    }
    let mut side = 0i8;
    for iter in 0..cap {
        if hi - lo <= tol {
            return Ok(hi);
        }
        let denom = ghi - glo;
        let mut m = if denom != 0.0 { hi - ghi * (hi - lo) / denom } else { 0.5 * (lo + hi) };
        // secant acceleration with forced bisection every fourth iteration
        if iter % 4 == 3 || !m.is_finite() || m <= lo || m >= hi {
            m = 0.5 * (lo + hi);
        }
        if m <= lo || m >= hi {
            return Ok(hi); // bracket exhausted at floating-point resolution
        }
        let gm = probe(m)?;
        if !gm.is_finite() {
            return Err(SimError::NonFiniteGuard { guard, t: m });
        }
        if gm == 0.0 {
            return Ok(m);
        }
        if (gm > 0.0) == (glo > 0.0) {
            lo = m;
            glo = gm;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = m;
            ghi = gm;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
    }
    Ok(hi)
}

/// Localize the zero crossing of `g` inside an accepted step to a time
/// bracket of width `tol_t`, returning the bracket's right edge.
///
/// Requires a sign change of g over the step, or an exactly-zero value
/// at one endpoint (a zero left endpoint reports the step start).
pub fn locate_event_time<T: Scalar>(
    g: impl Fn(&[T], T) -> T,
    record: &StepRecord<T>,
    tol_t: f64,
) -> Result<f64, SimError> {
    let vals = record.values();
    let t0 = vals.t;
    let t1 = vals.t + vals.dt;
    let probe = |tau: f64| -> Result<f64, SimError> {
        let x: Vec<T> = vals.eval(tau).iter().map(|&v| T::from_f64(v)).collect();
        let gv = g(&x, T::from_f64(tau)).value();
        if !gv.is_finite() {
            return Err(SimError::NonFiniteGuard { guard: 0, t: tau });
        }
        Ok(gv)
    };
    let g0 = probe(t0)?;
    let g1 = probe(t1)?;
    locate_event_time_raw(probe, (t0, t1), (g0, g1), tol_t, EVENT_ITER_CAP, 0)
}

/// Event time as a scalar carrying the implicit-function sensitivity.
///
/// ġ is estimated by a central difference of g along the dense output;
/// below the transversality threshold the event counts as grazing.
pub(crate) fn newton_event_time<T: Scalar>(
    record: &StepRecord<T>,
    g: &(dyn Fn(&[T], T) -> T + Send + Sync),
    t_star: f64,
    guard: usize,
) -> Result<T, SimError> {
    let vals = record.values();
    let h = (vals.dt.abs() * 1e-6).max(1e-12);
    let probe = |tau: f64| -> f64 {
        let x: Vec<T> = vals.eval(tau).iter().map(|&v| T::from_f64(v)).collect();
        g(&x, T::from_f64(tau)).value()
    };
    let gdot = (probe(t_star + h) - probe(t_star - h)) / (2.0 * h);
    if !gdot.is_finite() {
        return Err(SimError::NonFiniteGuard { guard, t: t_star });
    }
    if gdot.abs() < TRANSVERSALITY_THRESHOLD {
        return Err(SimError::GrazingEvent { guard, t: t_star, gdot });
    }
    let tau = T::from_f64(t_star);
    let x_tau = dense_eval(record, tau.clone())?;
    let g_ad = g(&x_tau, tau.clone());
    Ok(tau - g_ad / T::from_f64(gdot))
}

/// Apply a reset map to the pre-event state.
pub fn apply_reset<T: Scalar>(
    h: impl Fn(&[T], T, &[T]) -> Vec<T>,
    x_minus: &[T],
    t: T,
    theta: &[T],
    guard: usize,
) -> Result<Vec<T>, SimError> {
    debug_assert!(
        x_minus.iter().all(|v| v.value().is_finite()),
        "pre-event state must be finite"
    );
    let x_plus = h(x_minus, t.clone(), theta);
    if x_plus.iter().any(|v| !v.value().is_finite()) {
        return Err(SimError::ResetFailure { guard, t: t.value() });
    }
    Ok(x_plus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{step_tsit5, SolveOptions};

    const GRAV: f64 = 9.81;

    fn ball_rhs(dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]) -> Result<(), crate::error::RhsError> {
        dx[0] = x[1];
        dx[1] = -GRAV;
        Ok(())
    }

    fn ball_record() -> StepRecord<f64> {
        let opts = SolveOptions::default();
        // one step from (h, v) = (1, 0) across the first impact
        step_tsit5(&ball_rhs, &[1.0, 0.0], 0.0, 0.5, &[], &opts, None)
            .unwrap()
            .record
    }

    #[test]
    fn ball_impact_time_localized() {
        let record = ball_record();
        let t_star = locate_event_time(|x: &[f64], _t| x[0], &record, 1e-10).unwrap();
        let expected = (2.0_f64 / GRAV).sqrt();
        assert!((t_star - expected).abs() < 1e-8, "{t_star} vs {expected}");
    }

    #[test]
    fn linear_in_time_guard() {
        let opts = SolveOptions::default();
        let rhs = |dx: &mut [f64], _x: &[f64], _t: f64, _th: &[f64]| -> Result<(), crate::error::RhsError> {
            dx[0] = 1.0;
            Ok(())
        };
        let record = step_tsit5(&rhs, &[0.0], 0.4, 0.2, &[], &opts, None).unwrap().record;
        let t_star = locate_event_time(|_x: &[f64], t| t - 0.5, &record, 1e-12).unwrap();
        assert!((t_star - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn zero_at_step_start_fires_at_start() {
        let record = ball_record();
        // guard already zero at the left endpoint: g = 1 − h
        let t_star = locate_event_time(|x: &[f64], _t| 1.0 - x[0], &record, 1e-10).unwrap();
        assert_eq!(t_star, 0.0);
    }

    #[test]
    fn no_sign_change_is_an_error() {
        let record = ball_record();
        let err = locate_event_time(|x: &[f64], _t| x[0] + 10.0, &record, 1e-10);
        assert!(matches!(err, Err(SimError::NoSignChange { .. })));
    }

    #[test]
    fn reset_identity_and_restitution() {
        let x_minus = [0.0, -3.0];
        let same = apply_reset(
            |x: &[f64], _t, _th| x.to_vec(),
            &x_minus,
            0.45,
            &[],
            0,
        )
        .unwrap();
        assert_eq!(same, x_minus.to_vec());

        let bounced = apply_reset(
            |x: &[f64], _t, _th| vec![x[0], -0.8 * x[1]],
            &x_minus,
            0.45,
            &[],
            0,
        )
        .unwrap();
        assert!((bounced[1] - 2.4).abs() < 1e-15);
    }

    #[test]
    fn non_finite_reset_is_reported() {
        let err = apply_reset(
            |x: &[f64], _t, _th| vec![x[0] / 0.0],
            &[0.0],
            1.0,
            &[],
            3,
        );
        assert!(matches!(err, Err(SimError::ResetFailure { guard: 3, .. })));
    }

    #[test]
    fn newton_correction_refines_the_root() {
        let record = ball_record();
        let g = |x: &[f64], _t: f64| x[0];
        let rough = locate_event_time(g, &record, 1e-6).unwrap();
        let refined = newton_event_time(&record, &g, rough, 0).unwrap();
        let expected = (2.0_f64 / GRAV).sqrt();
        assert!((refined - expected).abs() < 1e-10);
    }

    #[test]
    fn grazing_event_detected() {
        let opts = SolveOptions::default();
        // ẋ = (1, 0): x1 constant at 0 → guard on x1 never moves
        let rhs = |dx: &mut [f64], _x: &[f64], _t: f64, _th: &[f64]| -> Result<(), crate::error::RhsError> {
            dx[0] = 1.0;
            dx[1] = 0.0;
            Ok(())
        };
        let record = step_tsit5(&rhs, &[0.0, 0.0], 0.0, 0.1, &[], &opts, None).unwrap().record;
        let err = newton_event_time(&record, &|x: &[f64], _t: f64| x[1], 0.05, 7);
        assert!(matches!(err, Err(SimError::GrazingEvent { guard: 7, .. })));
    }
}
