//! Adaptive Tsit5 (explicit Runge-Kutta 4/5) integration with embedded
//! error control, dense output, exact stepping onto prescribed stop
//! times, and guard handling.
//!
//! Step sizes, acceptance decisions, and event brackets are computed on
//! primal values and enter the arithmetic as frozen constants, so a
//! solve on dual or tape scalars walks exactly the accepted-step
//! sequence of the plain `f64` solve and differentiates through it.
//! The one exception is a step truncated onto a stop time after a
//! continuous-guard event: its length is formed as `stop − t` in scalar
//! arithmetic, which carries the event-time sensitivity into the state.

use crate::error::SimError;
use crate::events::{locate_event_time_raw, newton_event_time, EVENT_ITER_CAP};
use crate::hybrid::{Guard, HybridSystem};
use crate::scalar::Scalar;

// Tsitouras 5(4) pair. Row 7 of `A` equals the propagated 5th-order
// weights (FSAL: the 7th stage is the derivative at the step end).
pub const STAGES: usize = 7;

const C: [f64; 7] = [0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.161, 0.0, 0.0, 0.0, 0.0, 0.0],
    [-0.008480655492356989, 0.335480655492357, 0.0, 0.0, 0.0, 0.0],
    [2.8971530571054935, -6.359448489975075, 4.3622954328695815, 0.0, 0.0, 0.0],
    [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525, 0.0, 0.0],
    [
        5.86145544294642,
        -12.92096931784711,
        8.159367898576159,
        -0.071584973281401,
        -0.028269050394068383,
        0.0,
    ],
    [
        0.09646076681806523,
        0.01,
        0.4798896504144996,
        1.379008574103742,
        -3.290069515436081,
        2.324710524099774,
    ],
];

const B5: [f64; 7] = [
    0.09646076681806523,
    0.01,
    0.4798896504144996,
    1.379008574103742,
    -3.290069515436081,
    2.324710524099774,
    0.0,
];

// 5th-minus-4th order weights; error = dt · Σ BTILDE[i]·k[i]
const BTILDE: [f64; 7] = [
    -0.00178001105222577714,
    -0.0008164344596567469,
    0.007880878010261995,
    -0.1447110071732629,
    0.5823571654525552,
    -0.45808210592918697,
    0.015151515151515152,
];

/// Interpolation weights b_i(s) of the 4th-order continuous extension,
/// s ∈ [0, 1] the normalized position inside the step.
pub fn dense_weights<T: Scalar>(s: T) -> [T; 7] {
    let c = T::from_f64;
    let s2 = s.clone() * s.clone();
    let b1 = c(-1.0530884977290216)
        * s.clone()
        * (s.clone() - c(1.3299890189751412))
        * (s2.clone() - c(1.4364028541716351) * s.clone() + c(0.7139816917074209));
    let b2 = c(0.1017)
        * s2.clone()
        * (s2.clone() - c(2.1966568338249754) * s.clone() + c(1.2949852507374631));
    let b3 = c(2.490627285651252793)
        * s2.clone()
        * (s2.clone() - c(2.38535645472061657) * s.clone() + c(1.57803468208092486));
    let b4 = c(-16.54810288924490272)
        * (s.clone() - c(1.21712927295533244))
        * (s.clone() - c(0.61620406037800089))
        * s2.clone();
    let b5 = c(47.37952196281928122)
        * (s.clone() - c(1.203071208372362603))
        * (s.clone() - c(0.658047292653547382))
        * s2.clone();
    let b6 = c(-34.87065786149660974)
        * (s.clone() - c(1.2))
        * (s.clone() - c(0.666666666666666667))
        * s2.clone();
    let b7 = c(2.5) * (s.clone() - c(1.0)) * (s - c(0.6)) * s2;
    [b1, b2, b3, b4, b5, b6, b7]
}

/// One accepted (or attempted) step: everything dense output needs.
pub struct StepRecord<T> {
    pub t: T,
    pub dt: T,
    /// The 7 stage slopes k_1..k_7.
    pub stage_derivatives: Vec<Vec<T>>,
    pub x_begin: Vec<T>,
    pub x_end: Vec<T>,
    pub error_norm: f64,
}

/// Primal values of a step record, for cheap event-bracket probing.
pub struct StepRecordVals {
    pub t: f64,
    pub dt: f64,
    pub k: Vec<Vec<f64>>,
    pub x_begin: Vec<f64>,
}

impl<T: Scalar> StepRecord<T> {
    pub fn t_end(&self) -> f64 {
        self.t.value() + self.dt.value()
    }

    pub fn values(&self) -> StepRecordVals {
        StepRecordVals {
            t: self.t.value(),
            dt: self.dt.value(),
            k: self
                .stage_derivatives
                .iter()
                .map(|ki| ki.iter().map(|v| v.value()).collect())
                .collect(),
            x_begin: self.x_begin.iter().map(|v| v.value()).collect(),
        }
    }
}

impl StepRecordVals {
    /// Interpolant value at time `tau` (no range check; pure polynomial).
    pub fn eval(&self, tau: f64) -> Vec<f64> {
        let s = (tau - self.t) / self.dt;
        let w = dense_weights(s);
        let dim = self.x_begin.len();
        let mut out = Vec::with_capacity(dim);
        let mut gather = Vec::with_capacity(STAGES);
        for d in 0..dim {
            gather.clear();
            for ki in &self.k {
                gather.push(ki[d]);
            }
            out.push(self.x_begin[d] + self.dt * f64::dot(&gather, &w));
        }
        out
    }
}

/// Continuous extension of an accepted step at `tau ∈ [t, t+dt]`.
pub fn dense_eval<T: Scalar>(record: &StepRecord<T>, tau: T) -> Result<Vec<T>, SimError> {
    let t0 = record.t.value();
    let t1 = record.t_end();
    let tv = tau.value();
    let slack = 4.0 * f64::EPSILON * t1.abs().max(1.0);
    if tv < t0 - slack || tv > t1 + slack {
        return Err(SimError::DenseOutOfRange { tau: tv, t0, t1 });
    }
    let s = (tau - record.t.clone()) / record.dt.clone();
    let w = dense_weights(s);
    let dim = record.x_begin.len();
    let mut out = Vec::with_capacity(dim);
    let mut gather: Vec<T> = Vec::with_capacity(STAGES);
    for d in 0..dim {
        gather.clear();
        for ki in &record.stage_derivatives {
            gather.push(ki[d].clone());
        }
        out.push(record.x_begin[d].clone() + record.dt.clone() * T::dot(&gather, &w));
    }
    Ok(out)
}

/// Solver options; defaults follow the crate-wide tolerance choices.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SolveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
    /// Event-time localization tolerance scale: tol = scale·max(1, |t|).
    pub event_tol_scale: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-6, rel_tol: 1e-6, max_steps: 1_000_000, event_tol_scale: 1e-10 }
    }
}

impl SolveOptions {
    pub fn with_tols(abs_tol: f64, rel_tol: f64) -> Self {
        Self { abs_tol, rel_tol, ..Self::default() }
    }

    pub fn event_time_tol(&self, t: f64) -> f64 {
        self.event_tol_scale * t.abs().max(1.0)
    }
}

fn dt_min(t: f64) -> f64 {
    (4.0 * f64::EPSILON * t.abs()).max(1e-14)
}

/// Gap below which a stop is reached by one explicit-Euler micro step
/// instead of a full RK step.
fn micro_gap(t: f64) -> f64 {
    16.0 * f64::EPSILON * t.abs().max(1.0)
}

/// PI step-size controller (safety 0.9, growth clamp [0.2, 5]).
#[derive(Clone, Debug)]
pub struct StepController {
    pub safety: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    err_prev: f64,
}

impl Default for StepController {
    fn default() -> Self {
        Self {
            safety: 0.9,
            min_scale: 0.2,
            max_scale: 5.0,
            beta1: 0.7 / 5.0,
            beta2: 0.4 / 5.0,
            err_prev: 1e-4,
        }
    }
}

impl StepController {
    /// Scale factor for the next step after a step with `err_norm`.
    pub fn scale(&mut self, err_norm: f64, accepted: bool) -> f64 {
        if accepted {
            let scale = if err_norm == 0.0 {
                self.max_scale
            } else {
                (self.safety * err_norm.powf(-self.beta1) * self.err_prev.powf(self.beta2))
                    .clamp(self.min_scale, self.max_scale)
            };
            self.err_prev = err_norm.max(1e-4);
            scale
        } else {
            (self.safety * err_norm.powf(-0.2)).clamp(self.min_scale, 1.0)
        }
    }

    pub fn reset(&mut self) {
        self.err_prev = 1e-4;
    }
}

/// Result of one Tsit5 step.
pub struct StepResult<T> {
    pub error_norm: f64,
    pub record: StepRecord<T>,
}

impl<T> StepResult<T> {
    /// The 5th-order solution at the step end.
    pub fn x5(&self) -> &[T] {
        &self.record.x_end
    }
}

fn check_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.value().is_finite())
}

/// One Tsit5 step of size `dt` from `(t, x)`.
///
/// `k1` may pass the derivative at `(t, x)` when already known (FSAL).
/// The error estimate is the weighted RMS norm of the embedded
/// 4th/5th-order difference with weights `abs_tol + rel_tol·|x|`;
/// a value ≤ 1 means the step satisfies the tolerances.
pub fn step_tsit5<T, F>(
    rhs: &F,
    x: &[T],
    t: T,
    dt: T,
    theta: &[T],
    opts: &SolveOptions,
    k1: Option<Vec<T>>,
) -> Result<StepResult<T>, SimError>
where
    T: Scalar,
    F: Fn(&mut [T], &[T], T, &[T]) -> Result<(), crate::error::RhsError> + ?Sized,
{
    let dim = x.len();
    let tv = t.value();
    let dtv = dt.value();
    assert!(dtv > 0.0, "step size must be positive");
    let fail = |message: String| SimError::RhsFailure { t: tv, dt: dtv, message };

    let mut k: Vec<Vec<T>> = Vec::with_capacity(STAGES);
    let first = match k1 {
        Some(k1) => {
            assert_eq!(k1.len(), dim);
            k1
        }
        None => {
            let mut dx = vec![T::from_f64(0.0); dim];
            rhs(&mut dx, x, t.clone(), theta).map_err(|e| fail(e.message))?;
            dx
        }
    };
    if !check_finite(&first) {
        return Err(SimError::NonFiniteDerivative { t: tv, dt: dtv });
    }
    k.push(first);

    let mut stage_x = vec![T::from_f64(0.0); dim];
    let mut gather: Vec<T> = Vec::with_capacity(STAGES);
    for i in 1..STAGES {
        let a_row = &A[i][..i];
        for d in 0..dim {
            gather.clear();
            for kj in k.iter().take(i) {
                gather.push(kj[d].clone());
            }
            stage_x[d] = x[d].clone() + dt.clone() * T::lincomb(&gather, a_row);
        }
        let stage_t = t.clone() + T::from_f64(C[i]) * dt.clone();
        let mut dx = vec![T::from_f64(0.0); dim];
        rhs(&mut dx, &stage_x, stage_t, theta).map_err(|e| fail(e.message))?;
        if !check_finite(&dx) {
            return Err(SimError::NonFiniteDerivative { t: tv, dt: dtv });
        }
        k.push(dx);
    }

    // 5th-order solution; the last stage state equals it (row 7 of A = B5)
    let mut x5 = Vec::with_capacity(dim);
    for d in 0..dim {
        gather.clear();
        for kj in &k {
            gather.push(kj[d].clone());
        }
        x5.push(x[d].clone() + dt.clone() * T::lincomb(&gather, &B5));
    }
    if !check_finite(&x5) {
        return Err(SimError::NonFiniteState { t: tv, dt: dtv });
    }

    // weighted RMS error on primal values
    let mut acc = 0.0;
    for d in 0..dim {
        let mut e = 0.0;
        for (kj, &b) in k.iter().zip(&BTILDE) {
            e += kj[d].value() * b;
        }
        e *= dtv;
        let sc = opts.abs_tol + opts.rel_tol * x[d].value().abs().max(x5[d].value().abs());
        acc += (e / sc) * (e / sc);
    }
    let error_norm = (acc / dim as f64).sqrt();

    Ok(StepResult {
        error_norm,
        record: StepRecord {
            t,
            dt,
            stage_derivatives: k,
            x_begin: x.to_vec(),
            x_end: x5,
            error_norm,
        },
    })
}

/// Automatic initial step size (classical h₀ heuristic), computed on
/// primal values only.
pub fn initial_step<T, F>(
    rhs: &F,
    x: &[T],
    t: f64,
    t_end: f64,
    theta: &[T],
    opts: &SolveOptions,
) -> Result<f64, SimError>
where
    T: Scalar,
    F: Fn(&mut [T], &[T], T, &[T]) -> Result<(), crate::error::RhsError> + ?Sized,
{
    let dim = x.len();
    let fail = |message: String| SimError::RhsFailure { t, dt: 0.0, message };
    let wrms = |v: &[f64], xref: &[T]| -> f64 {
        let mut acc = 0.0;
        for (vi, xi) in v.iter().zip(xref) {
            let sc = opts.abs_tol + opts.rel_tol * xi.value().abs();
            acc += (vi / sc) * (vi / sc);
        }
        (acc / dim as f64).sqrt()
    };

    let xc: Vec<T> = x.iter().map(|v| T::from_f64(v.value())).collect();
    let mut f0 = vec![T::from_f64(0.0); dim];
    rhs(&mut f0, &xc, T::from_f64(t), theta).map_err(|e| fail(e.message))?;
    let f0v: Vec<f64> = f0.iter().map(|v| v.value()).collect();
    if f0v.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteDerivative { t, dt: 0.0 });
    }
    let x0v: Vec<f64> = x.iter().map(|v| v.value()).collect();

    let d0 = wrms(&x0v, x);
    let d1 = wrms(&f0v, x);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(t_end - t).max(1e-12);

    let x1: Vec<T> = x0v
        .iter()
        .zip(&f0v)
        .map(|(&xv, &fv)| T::from_f64(xv + h0 * fv))
        .collect();
    let mut f1 = vec![T::from_f64(0.0); dim];
    rhs(&mut f1, &x1, T::from_f64(t + h0), theta).map_err(|e| fail(e.message))?;
    let df: Vec<f64> = f1
        .iter()
        .zip(&f0v)
        .map(|(a, &b)| (a.value() - b) / h0)
        .collect();
    let d2 = wrms(&df, x);

    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(t_end - t))
}

/// A guard event: firing time, guard index, and the states just before
/// and after the reset.
pub struct EventRecord<T> {
    pub time: T,
    pub guard: usize,
    pub pre_state: Vec<T>,
    pub post_state: Vec<T>,
}

/// Simulation output: states at the requested save times plus the event log.
pub struct Trajectory<T> {
    pub sample_times: Vec<f64>,
    pub states: Vec<Vec<T>>,
    pub event_log: Vec<EventRecord<T>>,
    pub stats: SolveStats,
}

impl<T: Scalar> Trajectory<T> {
    pub fn state_values(&self, k: usize) -> Vec<f64> {
        self.states[k].iter().map(|v| v.value()).collect()
    }

    pub fn all_state_values(&self) -> Vec<Vec<f64>> {
        (0..self.states.len()).map(|k| self.state_values(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
    pub events: usize,
}

struct Stop {
    t: f64,
    save: bool,
    /// Indices of time-triggered reset rules firing here.
    resets: Vec<usize>,
}

fn insert_stop(stops: &mut Vec<Stop>, merge_tol: f64, t: f64, save: bool, reset: Option<usize>) {
    match stops.iter_mut().find(|s| (s.t - t).abs() <= merge_tol) {
        Some(s) => {
            s.save |= save;
            if let Some(r) = reset {
                if !s.resets.contains(&r) {
                    s.resets.push(r);
                }
            }
        }
        None => {
            stops.push(Stop { t, save, resets: reset.into_iter().collect() });
        }
    }
}

fn build_stops<T>(system: &HybridSystem<T>, t_span: (f64, f64), save_times: &[f64]) -> Vec<Stop> {
    let (t0, t1) = t_span;
    let merge_tol = 4.0 * f64::EPSILON * t1.abs().max(1.0);
    let mut stops: Vec<Stop> = Vec::new();
    for &st in save_times {
        assert!(
            st >= t0 - merge_tol && st <= t1 + merge_tol,
            "save time {st} outside the solve span [{t0}, {t1}]"
        );
        insert_stop(&mut stops, merge_tol, st.clamp(t0, t1), true, None);
    }
    for (idx, rule) in system.resets.iter().enumerate() {
        if let Guard::TimeTriggered(times) = &rule.guard {
            for &tt in times {
                if tt >= t0 - merge_tol && tt <= t1 + merge_tol {
                    insert_stop(&mut stops, merge_tol, tt.clamp(t0, t1), false, Some(idx));
                }
            }
        }
    }
    insert_stop(&mut stops, merge_tol, t1, false, None);
    insert_stop(&mut stops, merge_tol, t0, false, None);
    stops.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    // reset rules fire in declaration order at a shared instant
    for s in &mut stops {
        s.resets.sort_unstable();
    }
    stops
}

/// Integrate the hybrid system over `t_span`, recording the state at
/// every save time. Stop times (save times, time-triggered guard times,
/// the span end) are hit exactly by step truncation; resets apply
/// atomically, so the state recorded at a stop is the post-reset state.
pub fn adaptive_solve<T: Scalar>(
    system: &HybridSystem<T>,
    theta: &[T],
    t_span: (f64, f64),
    save_times: &[f64],
    opts: &SolveOptions,
) -> Result<Trajectory<T>, SimError> {
    let (t0, t1) = t_span;
    assert!(t1 > t0, "empty solve span");
    assert!(
        save_times.windows(2).all(|w| w[0] < w[1]),
        "save times must be strictly increasing"
    );
    assert!(opts.abs_tol > 0.0 && opts.rel_tol > 0.0, "tolerances must be positive");

    let dim = system.state_dim;
    let mut x: Vec<T> = (system.initial_state)(theta);
    if x.len() != dim {
        return Err(SimError::InitialStateDimension { got: x.len(), expected: dim });
    }
    if !check_finite(&x) {
        return Err(SimError::NonFiniteState { t: t0, dt: 0.0 });
    }

    let mut t_scalar = T::from_f64(t0);
    let mut t_val = t0;
    let mut stats = SolveStats::default();
    let mut trajectory = Trajectory {
        sample_times: Vec::with_capacity(save_times.len()),
        states: Vec::with_capacity(save_times.len()),
        event_log: Vec::new(),
        stats,
    };

    let n_rules = system.resets.len();
    let mut armed_until = vec![f64::NEG_INFINITY; n_rules];
    // g at the last accepted left endpoint, per continuous guard
    let mut g_left: Vec<Option<f64>> = vec![None; n_rules];

    let probe_guard = |rule: usize, xv: &[f64], tv: f64| -> Result<f64, SimError> {
        let Guard::Continuous(g) = &system.resets[rule].guard else {
            unreachable!("probe on a time-triggered guard")
        };
        let xl: Vec<T> = xv.iter().map(|&v| T::from_f64(v)).collect();
        let gv = g(&xl, T::from_f64(tv)).value();
        if !gv.is_finite() {
            return Err(SimError::NonFiniteGuard { guard: rule, t: tv });
        }
        Ok(gv)
    };

    let apply_rule = |rule: usize,
                      x_minus: &[T],
                      t_event: &T,
                      theta: &[T],
                      log: &mut Vec<EventRecord<T>>|
     -> Result<Vec<T>, SimError> {
        let tv = t_event.value();
        let x_plus = crate::events::apply_reset(
            system.resets[rule].reset.as_ref(),
            x_minus,
            t_event.clone(),
            theta,
            rule,
        )?;
        if x_plus.len() != dim {
            return Err(SimError::ResetDimension { guard: rule, got: x_plus.len(), expected: dim });
        }
        let _ = tv;
        log.push(EventRecord {
            time: t_event.clone(),
            guard: rule,
            pre_state: x_minus.to_vec(),
            post_state: x_plus.clone(),
        });
        Ok(x_plus)
    };

    let stops = build_stops(system, t_span, save_times);
    let mut controller = StepController::default();
    let mut dt_prop: Option<f64> = None; // None → run the h₀ heuristic
    let mut fsal: Option<Vec<T>> = None;

    let mut stop_iter = stops.iter();
    // process the first stop (possibly at t0) before flowing
    let first = stop_iter.next().expect("at least the span end stop exists");
    debug_assert!((first.t - t0).abs() <= 4.0 * f64::EPSILON * t1.abs().max(1.0));
    for &rule in &first.resets {
        let x_plus = apply_rule(rule, &x, &t_scalar, theta, &mut trajectory.event_log)?;
        x = x_plus;
        stats.events += 1;
        dt_prop = None;
        fsal = None;
    }
    if first.save {
        trajectory.sample_times.push(first.t);
        trajectory.states.push(x.clone());
    }

    for stop in stop_iter {
        let b = stop.t;
        // refresh continuous-guard left values at the segment entry
        for rule in 0..n_rules {
            if matches!(system.resets[rule].guard, Guard::Continuous(_)) {
                let xv: Vec<f64> = x.iter().map(|v| v.value()).collect();
                g_left[rule] = Some(probe_guard(rule, &xv, t_val)?);
            }
        }

        'segment: while b - t_val > 0.0 {
            // exact-zero guard at the current point fires immediately
            let mut immediate: Option<usize> = None;
            for rule in 0..n_rules {
                if t_val >= armed_until[rule] && g_left[rule] == Some(0.0) {
                    immediate = Some(rule);
                    break;
                }
            }
            if let Some(rule) = immediate {
                let x_plus = apply_rule(rule, &x, &t_scalar, theta, &mut trajectory.event_log)?;
                x = x_plus;
                stats.events += 1;
                armed_until[rule] = t_val + opts.event_time_tol(t_val);
                dt_prop = None;
                fsal = None;
                for r in 0..n_rules {
                    if matches!(system.resets[r].guard, Guard::Continuous(_)) {
                        let xv: Vec<f64> = x.iter().map(|v| v.value()).collect();
                        g_left[r] = Some(probe_guard(r, &xv, t_val)?);
                    }
                }
                continue 'segment;
            }

            let gap = b - t_val;
            if gap <= micro_gap(t_val) {
                // explicit-Euler micro step onto the stop
                let mut dx = vec![T::from_f64(0.0); dim];
                (system.rhs)(&mut dx, &x, t_scalar.clone(), theta).map_err(|e| {
                    SimError::RhsFailure { t: t_val, dt: gap, message: e.message }
                })?;
                stats.rhs_evals += 1;
                let h = T::from_f64(b) - t_scalar.clone();
                for d in 0..dim {
                    x[d] = x[d].clone() + h.clone() * dx[d].clone();
                }
                t_scalar = T::from_f64(b);
                t_val = b;
                fsal = None;
                break 'segment;
            }

            if stats.steps_accepted + stats.steps_rejected >= opts.max_steps {
                return Err(SimError::MaxStepsExceeded { t: t_val, max_steps: opts.max_steps });
            }

            let proposal = match dt_prop {
                Some(dt) => dt,
                None => {
                    controller.reset();
                    let h0 = initial_step(system.rhs.as_ref(), &x, t_val, t1, theta, opts)?;
                    stats.rhs_evals += 2;
                    h0
                }
            };
            let truncated = proposal >= gap;
            let dt_val = if truncated { gap } else { proposal };
            if !truncated && dt_val < dt_min(t_val) {
                return Err(SimError::StepSizeUnderflow {
                    t: t_val,
                    dt: dt_val,
                    dt_min: dt_min(t_val),
                });
            }
            let dt_scalar = if truncated {
                T::from_f64(b) - t_scalar.clone()
            } else {
                T::from_f64(dt_val)
            };

            let had_fsal = fsal.is_some();
            let step = step_tsit5(
                system.rhs.as_ref(),
                &x,
                t_scalar.clone(),
                dt_scalar,
                theta,
                opts,
                fsal.take(),
            )?;
            stats.rhs_evals += if had_fsal { STAGES - 1 } else { STAGES };

            if step.error_norm > 1.0 {
                stats.steps_rejected += 1;
                let scale = controller.scale(step.error_norm, false);
                dt_prop = Some(dt_val * scale);
                // FSAL stage of the rejected step is not at (t, x); k1 must
                // be recomputed, but the first stage is still valid:
                fsal = Some(step.record.stage_derivatives.into_iter().next().unwrap());
                continue 'segment;
            }

            // accepted: monitor continuous guards over [t_val, t_end]
            let t_end = t_val + dt_val;
            let mut hit: Option<(usize, f64)> = None;
            let mut vals: Option<StepRecordVals> = None;
            for rule in 0..n_rules {
                if !matches!(system.resets[rule].guard, Guard::Continuous(_)) {
                    continue;
                }
                if armed_until[rule] >= t_end {
                    continue;
                }
                let vals = vals.get_or_insert_with(|| step.record.values());
                let (left_t, left_g) = if armed_until[rule] > t_val {
                    let ta = armed_until[rule];
                    let ga = probe_guard(rule, &vals.eval(ta), ta)?;
                    (ta, ga)
                } else {
                    (t_val, g_left[rule].expect("left guard value cached"))
                };
                let right_g = probe_guard(rule, &step.record.x_end.iter().map(|v| v.value()).collect::<Vec<_>>(), t_end)?;
                let crossing = (left_g < 0.0 && right_g >= 0.0) || (left_g > 0.0 && right_g <= 0.0);
                if crossing {
                    let tol = opts.event_time_tol(t_end);
                    let t_star = locate_event_time_raw(
                        |tau| probe_guard(rule, &vals.eval(tau), tau),
                        (left_t, t_end),
                        (left_g, right_g),
                        tol,
                        EVENT_ITER_CAP,
                        rule,
                    )?;
                    if hit.map(|(_, best)| t_star < best).unwrap_or(true) {
                        hit = Some((rule, t_star));
                    }
                }
            }

            if let Some((rule, t_star_val)) = hit {
                stats.steps_accepted += 1;
                let Guard::Continuous(g) = &system.resets[rule].guard else { unreachable!() };
                let t_star = newton_event_time(&step.record, g.as_ref(), t_star_val, rule)?;
                let x_minus = dense_eval(&step.record, t_star.clone())?;
                let x_plus = apply_rule(rule, &x_minus, &t_star, theta, &mut trajectory.event_log)?;
                stats.events += 1;
                x = x_plus;
                t_val = t_star.value();
                t_scalar = t_star;
                armed_until[rule] = t_val + opts.event_time_tol(t_val);
                dt_prop = None; // fresh initial step after a reset
                fsal = None;
                for r in 0..n_rules {
                    if matches!(system.resets[r].guard, Guard::Continuous(_)) {
                        let xv: Vec<f64> = x.iter().map(|v| v.value()).collect();
                        g_left[r] = Some(probe_guard(r, &xv, t_val)?);
                    }
                }
                continue 'segment;
            }

            // plain acceptance
            stats.steps_accepted += 1;
            let scale = controller.scale(step.error_norm, true);
            dt_prop = Some(dt_val * scale);
            fsal = Some(step.record.stage_derivatives.last().unwrap().clone());
            for rule in 0..n_rules {
                if matches!(system.resets[rule].guard, Guard::Continuous(_)) {
                    let xv: Vec<f64> =
                        step.record.x_end.iter().map(|v| v.value()).collect();
                    g_left[rule] = Some(probe_guard(rule, &xv, t_end)?);
                }
            }
            x = step.record.x_end;
            if truncated {
                t_scalar = T::from_f64(b);
                t_val = b;
            } else {
                t_scalar = t_scalar + T::from_f64(dt_val);
                t_val = t_scalar.value();
            }
        }

        // arrived at the stop: resets first, then the state is recorded
        for &rule in &stop.resets {
            let x_plus = apply_rule(rule, &x, &t_scalar, theta, &mut trajectory.event_log)?;
            x = x_plus;
            stats.events += 1;
            dt_prop = None;
            fsal = None;
        }
        if stop.save {
            trajectory.sample_times.push(b);
            trajectory.states.push(x.clone());
        }
    }

    trajectory.stats = stats;
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::RhsError;

    fn exp_rhs(dx: &mut [f64], x: &[f64], _t: f64, _theta: &[f64]) -> Result<(), RhsError> {
        dx[0] = x[0];
        Ok(())
    }

    #[test]
    fn zero_field_step_is_exact() {
        let opts = SolveOptions::default();
        let rhs = |dx: &mut [f64], _x: &[f64], _t: f64, _th: &[f64]| -> Result<(), RhsError> {
            dx[0] = 0.0;
            dx[1] = 0.0;
            Ok(())
        };
        let step = step_tsit5(&rhs, &[3.0, -1.0], 0.0, 0.1, &[], &opts, None).unwrap();
        assert_eq!(step.x5(), &[3.0, -1.0]);
        assert_eq!(step.error_norm, 0.0);
    }

    #[test]
    fn exponential_step_accuracy() {
        let opts = SolveOptions::default();
        let step = step_tsit5(&exp_rhs, &[1.0], 0.0, 0.1, &[], &opts, None).unwrap();
        assert!((step.x5()[0] - 0.1_f64.exp()).abs() <= 1e-9);
    }

    #[test]
    fn stiff_step_is_rejected() {
        let opts = SolveOptions::default();
        let rhs = |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| -> Result<(), RhsError> {
            dx[0] = -50.0 * x[0];
            Ok(())
        };
        let step = step_tsit5(&rhs, &[1.0], 0.0, 0.5, &[], &opts, None).unwrap();
        assert!(step.error_norm > 1.0, "error norm {} should reject", step.error_norm);
    }

    #[test]
    fn stage_consistency_row_sums() {
        for i in 0..STAGES {
            let sum: f64 = A[i][..i.min(6)].iter().sum();
            assert!((sum - C[i]).abs() < 1e-12, "row {i}: {sum} vs {}", C[i]);
        }
        let b_sum: f64 = B5.iter().sum();
        assert!((b_sum - 1.0).abs() < 1e-12);
        let e_sum: f64 = BTILDE.iter().sum();
        assert!(e_sum.abs() < 1e-12);
    }

    #[test]
    fn dense_weights_match_endpoints() {
        let w0 = dense_weights(0.0);
        for v in w0 {
            assert_eq!(v, 0.0);
        }
        let w1 = dense_weights(1.0);
        for (a, b) in w1.iter().zip(&B5) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn dense_eval_endpoints_and_interior() {
        let opts = SolveOptions::default();
        let step = step_tsit5(&exp_rhs, &[1.0], 0.0, 0.2, &[], &opts, None).unwrap();
        let rec = step.record;
        let at_start = dense_eval(&rec, 0.0).unwrap();
        assert_eq!(at_start[0], 1.0);
        let at_end = dense_eval(&rec, 0.2).unwrap();
        let rel = (at_end[0] - rec.x_end[0]).abs() / rec.x_end[0].abs();
        assert!(rel < 1e-14);
        let mid = dense_eval(&rec, 0.1).unwrap();
        assert!((mid[0] - 0.1_f64.exp()).abs() < 1e-7);
        assert!(matches!(dense_eval(&rec, 0.3), Err(SimError::DenseOutOfRange { .. })));
        assert!(matches!(dense_eval(&rec, -0.1), Err(SimError::DenseOutOfRange { .. })));
    }

    #[test]
    fn adaptive_exponential_accuracy() {
        let sys = HybridSystem::ode(1, exp_rhs, vec![1.0]);
        let opts = SolveOptions::with_tols(1e-8, 1e-8);
        let traj = adaptive_solve(&sys, &[], (0.0, 1.0), &[0.0, 1.0], &opts).unwrap();
        assert_eq!(traj.sample_times, vec![0.0, 1.0]);
        assert!((traj.states[1][0] - 1.0_f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn fixed_step_order_is_five() {
        // Global error of repeated fixed Tsit5 steps on ẋ = −x over [0, 5],
        // measured on an h-window fine enough for the h⁵ term to dominate
        // (coarser steps show slope ≈ 5.34 because the method's z⁶
        // stability coefficient nearly matches the exponential's 1/720).
        let opts = SolveOptions::default();
        let rhs = |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| -> Result<(), RhsError> {
            dx[0] = -x[0];
            Ok(())
        };
        let mut errors = Vec::new();
        let hs: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
        for &h in &hs {
            let n = (5.0 / h).round() as usize;
            let mut x = vec![1.0];
            let mut t = 0.0;
            for _ in 0..n {
                let step = step_tsit5(&rhs, &x, t, h, &[], &opts, None).unwrap();
                x = step.record.x_end;
                t += h;
            }
            errors.push((x[0] - (-5.0_f64).exp()).abs());
        }
        // least-squares slope in log-log
        let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let slope = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
        assert!((4.7..=5.3).contains(&slope), "order slope {slope}");
    }

    #[test]
    fn tighter_tolerance_does_not_hurt() {
        let sys = HybridSystem::ode(
            1,
            |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| {
                dx[0] = -x[0];
                Ok(())
            },
            vec![1.0],
        );
        let exact = (-5.0_f64).exp();
        let mut prev_err = f64::INFINITY;
        for k in 0..13 {
            let tol = 1e-4 * 0.5_f64.powi(k);
            let opts = SolveOptions::with_tols(tol, tol);
            let traj = adaptive_solve(&sys, &[], (0.0, 5.0), &[5.0], &opts).unwrap();
            let err = (traj.states[0][0] - exact).abs();
            assert!(err <= 2.0 * prev_err, "tol {tol}: err {err} vs prev {prev_err}");
            prev_err = err;
        }
    }

    #[test]
    fn determinism_bitwise() {
        let sys = HybridSystem::ode(2, |dx: &mut [f64], x: &[f64], t: f64, _th: &[f64]| {
            dx[0] = x[1];
            dx[1] = -x[0] + (2.0 * t).sin();
            Ok(())
        }, vec![1.0, 0.0]);
        let opts = SolveOptions::default();
        let saves: Vec<f64> = (0..=10).map(|k| k as f64 * 0.3).collect();
        let a = adaptive_solve(&sys, &[], (0.0, 3.0), &saves, &opts).unwrap();
        let b = adaptive_solve(&sys, &[], (0.0, 3.0), &saves, &opts).unwrap();
        assert_eq!(a.all_state_values(), b.all_state_values());
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn save_times_hit_exactly() {
        let sys = HybridSystem::ode(1, exp_rhs, vec![1.0]);
        let opts = SolveOptions::default();
        let saves = [0.0, 0.3, 0.7, 1.0];
        let traj = adaptive_solve(&sys, &[], (0.0, 1.0), &saves, &opts).unwrap();
        assert_eq!(traj.sample_times, saves);
    }

    #[test]
    fn max_steps_budget() {
        let sys = HybridSystem::ode(1, exp_rhs, vec![1.0]);
        let opts = SolveOptions { max_steps: 3, ..Default::default() };
        let err = adaptive_solve(&sys, &[], (0.0, 100.0), &[100.0], &opts);
        assert!(matches!(err, Err(SimError::MaxStepsExceeded { .. })));
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let sys = HybridSystem::ode(1, |dx: &mut [f64], x: &[f64], _t: f64, _th: &[f64]| {
            dx[0] = (x[0] - 2.0).ln(); // NaN once x > ... at start x=1 → ln(−1)
            Ok(())
        }, vec![1.0]);
        let opts = SolveOptions::default();
        let err = adaptive_solve(&sys, &[], (0.0, 1.0), &[1.0], &opts);
        assert!(matches!(err, Err(SimError::NonFiniteDerivative { .. })));
    }
}
