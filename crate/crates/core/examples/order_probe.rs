// Scratch probe for solver calibration (not part of the test suite).
use hysid::hybrid::HybridSystem;
use hysid::integrator::{adaptive_solve, step_tsit5, SolveOptions};

fn main() {
    let opts = SolveOptions::default();
    let rhs = |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| -> Result<(), hysid::RhsError> {
        dx[0] = -x[0];
        Ok(())
    };
    println!("fixed-step errors on x' = -x over [0,5]:");
    let hs: [f64; 6] = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125];
    let mut prev: Option<f64> = None;
    for &h in &hs {
        let n = (5.0 / h).round() as usize;
        let mut x = vec![1.0];
        let mut t = 0.0;
        for _ in 0..n {
            let step = step_tsit5(&rhs, &x, t, h, &[], &opts, None).unwrap();
            x = step.record.x_end;
            t += h;
        }
        let err = (x[0] - (-5.0_f64).exp()).abs();
        let ratio = prev.map(|p: f64| (p / err).log2()).unwrap_or(0.0);
        println!("  h={h:<8} err={err:.3e} local order={ratio:.3}");
        prev = Some(err);
    }

    println!("adaptive final error vs tolerance on x' = x over [0,1]:");
    let sys = HybridSystem::ode(
        1,
        |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| {
            dx[0] = x[0];
            Ok(())
        },
        vec![1.0],
    );
    for k in 0..14 {
        let tol = 1e-4 * 0.5_f64.powi(k);
        let o = SolveOptions::with_tols(tol, tol);
        let traj = adaptive_solve(&sys, &[], (0.0, 1.0), &[1.0], &o).unwrap();
        let err = (traj.states[0][0] - 1.0_f64.exp()).abs();
        println!("  tol={tol:.3e} err={err:.3e} steps={}", traj.stats.steps_accepted);
    }

    println!("same on x' = -x over [0,5]:");
    let sys2 = HybridSystem::ode(
        1,
        |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| {
            dx[0] = -x[0];
            Ok(())
        },
        vec![1.0],
    );
    for k in 0..14 {
        let tol = 1e-4 * 0.5_f64.powi(k);
        let o = SolveOptions::with_tols(tol, tol);
        let traj = adaptive_solve(&sys2, &[], (0.0, 5.0), &[5.0], &o).unwrap();
        let err = (traj.states[0][0] - (-5.0_f64).exp()).abs();
        println!("  tol={tol:.3e} err={err:.3e} steps={}", traj.stats.steps_accepted);
    }
}
