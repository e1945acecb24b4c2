//! Gradient drivers: reverse (tape), forward (dual), finite differences,
//! and the event-time sensitivity helper for continuous guards.

use crate::error::{AdError, SimError};
use crate::scalar::Scalar;

use super::forward::Dual;
use super::tape::{self, Var};

/// A scalar function of the parameter vector, generic over the scalar
/// type so the same code runs on plain values, duals, and tape variables.
pub trait ScalarLoss: Sync {
    fn eval<T: Scalar>(&self, theta: &[T]) -> Result<T, SimError>;
}

/// Forward mode processes tangents in blocks of this many directions.
pub const FORWARD_BLOCK: usize = 16;

/// Reverse-mode value and gradient via the tape.
pub fn grad_reverse(loss: &impl ScalarLoss, theta: &[f64]) -> Result<(f64, Vec<f64>), AdError> {
    grad_reverse_with_budget(loss, theta, tape::DEFAULT_NODE_BUDGET)
}

pub fn grad_reverse_with_budget(
    loss: &impl ScalarLoss,
    theta: &[f64],
    budget_nodes: usize,
) -> Result<(f64, Vec<f64>), AdError> {
    let rec = tape::record_gradient(theta, budget_nodes, false, |vars: &[Var]| {
        let out = loss.eval(vars)?;
        let value = out.value();
        Ok((out, value))
    })?;
    let value = rec.result;
    Ok((value, rec.gradient()))
}

/// Directional derivatives J·directions by running the whole computation
/// on dual scalars. Directions are seed vectors of length `theta.len()`.
pub fn grad_forward(
    loss: &impl ScalarLoss,
    theta: &[f64],
    directions: &[Vec<f64>],
) -> Result<(f64, Vec<f64>), AdError> {
    for d in directions {
        if d.len() != theta.len() {
            return Err(AdError::SeedDimension { got: d.len(), expected: theta.len() });
        }
    }
    let mut value = 0.0;
    let mut derivs = Vec::with_capacity(directions.len());
    for block in directions.chunks(FORWARD_BLOCK.max(1)) {
        let width = block.len();
        let seeds: Vec<Dual> = theta
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let tangent: Vec<f64> = block.iter().map(|dir| dir[i]).collect();
                Dual::with_tangent(v, tangent)
            })
            .collect();
        let out = loss.eval(&seeds)?;
        value = out.value();
        for k in 0..width {
            derivs.push(out.tangent_at(k));
        }
    }
    Ok((value, derivs))
}

/// Full forward-mode gradient (identity seeds).
pub fn grad_forward_full(
    loss: &impl ScalarLoss,
    theta: &[f64],
) -> Result<(f64, Vec<f64>), AdError> {
    let n = theta.len();
    let directions: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    grad_forward(loss, theta, &directions)
}

/// Central-difference gradient, the independent verification oracle.
pub fn grad_fd(loss: &impl ScalarLoss, theta: &[f64], eps: f64) -> Result<Vec<f64>, SimError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut g = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let up = loss.eval::<f64>(&work)?;
        work[i] = theta[i] - eps;
        let down = loss.eval::<f64>(&work)?;
        work[i] = theta[i];
        g[i] = (up - down) / (2.0 * eps);
    }
    Ok(g)
}

/// Central-difference derivatives for a subset of coordinates; entries
/// outside `coords` are returned as NaN.
pub fn grad_fd_subset(
    loss: &impl ScalarLoss,
    theta: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>, SimError> {
    let mut g = vec![f64::NAN; theta.len()];
    let mut work = theta.to_vec();
    for &i in coords {
        work[i] = theta[i] + eps;
        let up = loss.eval::<f64>(&work)?;
        work[i] = theta[i] - eps;
        let down = loss.eval::<f64>(&work)?;
        work[i] = theta[i];
        g[i] = (up - down) / (2.0 * eps);
    }
    Ok(g)
}

/// Transversality threshold below which an event counts as grazing.
pub const TRANSVERSALITY_THRESHOLD: f64 = 1e-12;

/// Sensitivity of a continuous-guard event time to one parameter
/// direction: dt*/dθ = −(∂g/∂x · ∂x/∂θ) / ġ with ġ = ∂g/∂x·f + ∂g/∂t.
///
/// `x_sensitivity` is ∂x/∂θ at the event time for the chosen direction,
/// `rhs_at_event` is f(x, t*). Inside the solver the same quantity is
/// produced implicitly by the Newton-correction step; this helper exists
/// for direct checks against analytic event-time derivatives.
pub fn event_time_sensitivity(
    g: impl Fn(&[Dual], Dual) -> Dual,
    x_sensitivity: &[f64],
    rhs_at_event: &[f64],
    x: &[f64],
    t_star: f64,
) -> Result<f64, SimError> {
    let n = x.len();
    assert_eq!(x_sensitivity.len(), n);
    assert_eq!(rhs_at_event.len(), n);
    // directions 0..n seed the state components, direction n seeds time
    let xs: Vec<Dual> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| Dual::seeded(v, n + 1, i))
        .collect();
    let t = Dual::seeded(t_star, n + 1, n);
    let gv = g(&xs, t);
    let g_x: Vec<f64> = (0..n).map(|i| gv.tangent_at(i)).collect();
    let g_t = gv.tangent_at(n);
    let gdot: f64 = g_x.iter().zip(rhs_at_event).map(|(a, b)| a * b).sum::<f64>() + g_t;
    if gdot.abs() < TRANSVERSALITY_THRESHOLD {
        return Err(SimError::GrazingEvent { guard: 0, t: t_star, gdot });
    }
    let num: f64 = g_x.iter().zip(x_sensitivity).map(|(a, b)| a * b).sum();
    Ok(-num / gdot)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl ScalarLoss for Quadratic {
        fn eval<T: Scalar>(&self, theta: &[T]) -> Result<T, SimError> {
            let mut acc = T::from_f64(0.0);
            for t in theta {
                acc = acc + t.clone() * t.clone();
            }
            Ok(acc)
        }
    }

    #[test]
    fn quadratic_all_three_modes() {
        let theta = [1.0, 2.0];
        let (lr, gr) = grad_reverse(&Quadratic, &theta).unwrap();
        let (lf, gf) = grad_forward_full(&Quadratic, &theta).unwrap();
        let gd = grad_fd(&Quadratic, &theta, 1e-5).unwrap();
        assert_eq!(lr, 5.0);
        assert_eq!(lf, 5.0);
        assert_eq!(gr, vec![2.0, 4.0]);
        assert_eq!(gf, vec![2.0, 4.0]);
        assert!((gd[0] - 2.0).abs() < 1e-8);
        assert!((gd[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn zero_seeds_return_zero_derivatives() {
        let theta = [1.0, 2.0];
        let dirs = vec![vec![0.0, 0.0]];
        let (val, d) = grad_forward(&Quadratic, &theta, &dirs).unwrap();
        assert_eq!(val, 5.0);
        assert_eq!(d, vec![0.0]);
    }

    #[test]
    fn forward_blocks_cover_many_directions() {
        struct Sum;
        impl ScalarLoss for Sum {
            fn eval<T: Scalar>(&self, theta: &[T]) -> Result<T, SimError> {
                let mut acc = T::from_f64(0.0);
                for (i, t) in theta.iter().enumerate() {
                    acc = acc + t.clone() * T::from_f64((i + 1) as f64);
                }
                Ok(acc)
            }
        }
        let n = 40; // forces three blocks
        let theta: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (_, g) = grad_forward_full(&Sum, &theta).unwrap();
        for (i, gi) in g.iter().enumerate() {
            assert_eq!(*gi, (i + 1) as f64);
        }
    }

    #[test]
    fn seed_dimension_is_checked() {
        let err = grad_forward(&Quadratic, &[1.0, 2.0], &[vec![1.0]]);
        assert!(matches!(err, Err(AdError::SeedDimension { got: 1, expected: 2 })));
    }

    #[test]
    fn bouncing_ball_event_time_sensitivity() {
        // ballistic fall from h0 = 1: t* = sqrt(2 h0 / 9.81)
        let grav = 9.81;
        let h0 = 1.0;
        let t_star = (2.0 * h0 / grav).sqrt();
        let v_impact = -grav * t_star;
        // state (h, v); ∂x/∂h0 at fixed t is (1, 0)
        let sens = event_time_sensitivity(
            |x, _t| x[0].clone(),
            &[1.0, 0.0],
            &[v_impact, -grav],
            &[0.0, v_impact],
            t_star,
        )
        .unwrap();
        let expected = 1.0 / (2.0 * grav * h0).sqrt();
        assert!((sens - expected).abs() < 1e-12, "{sens} vs {expected}");
    }

    #[test]
    fn restitution_does_not_move_first_impact() {
        // θ = restitution: state does not depend on it before the impact
        let grav = 9.81;
        let t_star = (2.0_f64 / grav).sqrt();
        let v_impact = -grav * t_star;
        let sens = event_time_sensitivity(
            |x, _t| x[0].clone(),
            &[0.0, 0.0],
            &[v_impact, -grav],
            &[0.0, v_impact],
            t_star,
        )
        .unwrap();
        assert_eq!(sens, 0.0);
    }

    #[test]
    fn grazing_event_is_an_error() {
        let err = event_time_sensitivity(
            |x, _t| x[0].clone(),
            &[1.0],
            &[0.0], // ġ = 0: tangential crossing
            &[0.0],
            1.0,
        );
        assert!(matches!(err, Err(SimError::GrazingEvent { .. })));
    }

    #[test]
    fn time_dependent_guard_sensitivity() {
        // g(x, t) = t − x0; ġ = 1 − f0
        let sens = event_time_sensitivity(
            |x, t| t - x[0].clone(),
            &[2.0],
            &[0.25],
            &[0.5],
            0.5,
        )
        .unwrap();
        // dt* = −(−1·2.0)/(1 − 0.25)
        assert!((sens - 2.0 / 0.75).abs() < 1e-14);
    }
}
