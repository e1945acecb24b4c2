//! Hybrid-system abstraction: continuous flow plus guard-triggered resets.
//!
//! A system owns its right-hand side `f(x, t, θ)`, a list of (guard,
//! reset) pairs, and the initial-state map `x₀(θ)`. Guards are either
//! continuous (a scalar function whose zero crossing triggers the reset)
//! or time-triggered (a finite sorted list of firing times). Everything
//! is generic over the scalar type so the same assembled system can be
//! simulated on plain values, duals, or tape variables.

use crate::error::{ConfigError, RhsError};
use crate::scalar::Scalar;

pub type RhsFn<T> = Box<dyn Fn(&mut [T], &[T], T, &[T]) -> Result<(), RhsError> + Send + Sync>;
pub type ResetFn<T> = Box<dyn Fn(&[T], T, &[T]) -> Vec<T> + Send + Sync>;
pub type InitFn<T> = Box<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;
pub type GuardFn<T> = Box<dyn Fn(&[T], T) -> T + Send + Sync>;

pub enum Guard<T> {
    /// Fires when g(x, t) crosses zero; localized by root finding.
    Continuous(GuardFn<T>),
    /// Fires exactly at each listed time; times are strictly increasing.
    TimeTriggered(Vec<f64>),
}

impl<T> Guard<T> {
    pub fn time_triggered(times: Vec<f64>) -> Result<Self, ConfigError> {
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::InvalidSchedule(
                "time-triggered guard times must be strictly increasing".into(),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(ConfigError::InvalidSchedule(
                "time-triggered guard times must be finite".into(),
            ));
        }
        Ok(Guard::TimeTriggered(times))
    }
}

pub struct ResetRule<T> {
    pub guard: Guard<T>,
    pub reset: ResetFn<T>,
}

pub struct HybridSystem<T> {
    pub state_dim: usize,
    pub rhs: RhsFn<T>,
    pub resets: Vec<ResetRule<T>>,
    pub initial_state: InitFn<T>,
}

impl<T: Scalar> HybridSystem<T> {
    /// A plain ODE: continuous flow with no resets, initial state fixed.
    pub fn ode(
        state_dim: usize,
        rhs: impl Fn(&mut [T], &[T], T, &[T]) -> Result<(), RhsError> + Send + Sync + 'static,
        x0: Vec<f64>,
    ) -> Self {
        assert_eq!(x0.len(), state_dim);
        HybridSystem {
            state_dim,
            rhs: Box::new(rhs),
            resets: Vec::new(),
            initial_state: Box::new(move |_| x0.iter().map(|&v| T::from_f64(v)).collect()),
        }
    }
}

/// Uniform sample grid {t_k}, k = 1..N, with period `dt`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct SampleSchedule {
    times: Vec<f64>,
    dt: f64,
}

impl SampleSchedule {
    /// Grid t0, t0+dt, ..., with `n` samples.
    pub fn uniform(t0: f64, dt: f64, n: usize) -> Result<Self, ConfigError> {
        if t0 < 0.0 {
            return Err(ConfigError::InvalidSchedule("schedule must start at t >= 0".into()));
        }
        if dt <= 0.0 || n == 0 {
            return Err(ConfigError::InvalidSchedule("schedule needs dt > 0 and n >= 1".into()));
        }
        let times = (0..n).map(|k| t0 + dt * k as f64).collect();
        Ok(Self { times, dt })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self, ConfigError> {
        if times.is_empty() {
            return Err(ConfigError::InvalidSchedule("empty schedule".into()));
        }
        if times[0] < 0.0 {
            return Err(ConfigError::InvalidSchedule("schedule must start at t >= 0".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::InvalidSchedule("schedule times must be strictly increasing".into()));
        }
        let dt = if times.len() >= 2 { times[1] - times[0] } else { 0.0 };
        // uniform spacing within a ulp-scale tolerance
        let tol = 4.0 * f64::EPSILON * times.last().unwrap().abs().max(1.0);
        if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > tol) {
            return Err(ConfigError::InvalidSchedule("schedule spacing is not uniform".into()));
        }
        Ok(Self { times, dt })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn period(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample index of time `t` on the grid.
    pub fn index_of(&self, t: f64) -> usize {
        if self.dt == 0.0 {
            return 0;
        }
        let k = ((t - self.times[0]) / self.dt).round();
        (k.max(0.0) as usize).min(self.times.len() - 1)
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Named, contiguous segments of the flat parameter vector.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ParamLayout {
    segments: Vec<(String, usize)>,
}

impl ParamLayout {
    pub fn new(segments: &[(&str, usize)]) -> Result<Self, ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (name, len) in segments {
            if *len == 0 {
                return Err(ConfigError::InvalidLayout(format!("segment `{name}` has zero length")));
            }
            if !seen.insert(*name) {
                return Err(ConfigError::InvalidLayout(format!("duplicate segment `{name}`")));
            }
        }
        Ok(Self {
            segments: segments.iter().map(|(n, l)| (n.to_string(), *l)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|(_, l)| l).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, std::ops::Range<usize>)> {
        let mut offset = 0;
        self.segments.iter().map(move |(name, len)| {
            let range = offset..offset + len;
            offset += len;
            (name.as_str(), range)
        })
    }

    pub fn range(&self, name: &str) -> Result<std::ops::Range<usize>, ConfigError> {
        self.segments()
            .find(|(n, _)| *n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| ConfigError::UnknownSegment(name.to_string()))
    }

    /// Segment name covering flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&str> {
        self.segments().find(|(_, r)| r.contains(&i)).map(|(n, _)| n)
    }

    /// Concatenate named segment values into the flat vector. The parts
    /// must cover every segment exactly once, in any order.
    pub fn pack(&self, parts: &[(&str, &[f64])]) -> Result<Vec<f64>, ConfigError> {
        if parts.len() != self.segments.len() {
            return Err(ConfigError::InvalidLayout(format!(
                "pack got {} parts, layout has {} segments",
                parts.len(),
                self.segments.len()
            )));
        }
        let mut values = vec![0.0; self.len()];
        for (name, vals) in parts {
            let range = self.range(name)?;
            if vals.len() != range.len() {
                return Err(ConfigError::DimensionMismatch(format!(
                    "segment `{name}` expects {} values, got {}",
                    range.len(),
                    vals.len()
                )));
            }
            values[range].copy_from_slice(vals);
        }
        Ok(values)
    }

    /// Split the flat vector back into named segments.
    pub fn unpack<'a>(&self, values: &'a [f64]) -> Result<Vec<(&str, &'a [f64])>, ConfigError> {
        if values.len() != self.len() {
            return Err(ConfigError::DimensionMismatch(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                self.len()
            )));
        }
        Ok(self
            .segments()
            .map(|(name, range)| (name, &values[range]))
            .collect())
    }
}

/// A flat parameter vector together with its named layout.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self, ConfigError> {
        if values.len() != layout.len() {
            return Err(ConfigError::DimensionMismatch(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn segment(&self, name: &str) -> Result<&[f64], ConfigError> {
        Ok(&self.values[self.layout.range(name)?])
    }
}

/// Slice the named segment out of a generic parameter slice.
pub fn segment<'a, T>(theta: &'a [T], layout: &ParamLayout, name: &str) -> Result<&'a [T], ConfigError> {
    let range = layout.range(name)?;
    if theta.len() != layout.len() {
        return Err(ConfigError::DimensionMismatch(format!(
            "parameter vector has {} values, layout expects {}",
            theta.len(),
            layout.len()
        )));
    }
    Ok(&theta[range])
}

/// Assemble plant + zero-order-hold discrete-time controller into one
/// hybrid system on the augmented state (plant state ⊕ held control).
///
/// The held control segment has zero continuous derivative; a
/// time-triggered guard at the schedule times rewrites it through
/// `controller`, which receives the full augmented state at the sample
/// instant and returns the new held control.
pub fn assemble_closed_loop<T: Scalar + 'static>(
    plant_dim: usize,
    ctrl_dim: usize,
    plant_rhs: impl Fn(&mut [T], &[T], T, &[T]) -> Result<(), RhsError> + Send + Sync + 'static,
    controller: impl Fn(&[T], f64, &[T]) -> Vec<T> + Send + Sync + 'static,
    schedule: &SampleSchedule,
    x0: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
) -> Result<HybridSystem<T>, ConfigError> {
    if plant_dim == 0 || ctrl_dim == 0 {
        return Err(ConfigError::DimensionMismatch(
            "plant and control dimensions must be positive".into(),
        ));
    }
    let state_dim = plant_dim + ctrl_dim;
    let guard = Guard::time_triggered(schedule.times().to_vec())?;

    let rhs: RhsFn<T> = Box::new(move |dx, x, t, theta| {
        plant_rhs(&mut dx[..plant_dim], x, t, theta)?;
        for d in dx[plant_dim..].iter_mut() {
            *d = T::from_f64(0.0);
        }
        Ok(())
    });

    let reset: ResetFn<T> = Box::new(move |x, t, theta| {
        let control = controller(x, t.value(), theta);
        assert_eq!(
            control.len(),
            ctrl_dim,
            "controller returned {} values for a control segment of {}",
            control.len(),
            ctrl_dim
        );
        let mut out = x.to_vec();
        out[plant_dim..].clone_from_slice(&control);
        out
    });

    Ok(HybridSystem {
        state_dim,
        rhs,
        resets: vec![ResetRule { guard, reset }],
        initial_state: Box::new(x0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_schedule_matches_paper_grid() {
        let s = SampleSchedule::uniform(0.0, 0.05, 201).unwrap();
        assert_eq!(s.len(), 201);
        assert_eq!(s.times()[0], 0.0);
        assert!((s.end() - 10.0).abs() < 1e-12);
        assert_eq!(s.index_of(0.05), 1);
        assert_eq!(s.index_of(10.0), 200);
    }

    #[test]
    fn schedule_rejects_nonuniform_or_decreasing() {
        assert!(SampleSchedule::from_times(vec![0.0, 0.1, 0.15]).is_err());
        assert!(SampleSchedule::from_times(vec![0.0, 0.1, 0.1]).is_err());
        assert!(SampleSchedule::from_times(vec![-1.0, 0.0]).is_err());
        assert!(SampleSchedule::from_times(vec![0.0, 0.1, 0.2]).is_ok());
    }

    #[test]
    fn layout_pack_unpack_roundtrip() {
        let layout = ParamLayout::new(&[("k", 3), ("w", 3), ("I", 3)]).unwrap();
        assert_eq!(layout.len(), 9);
        let k = [0.1, 0.2, 0.3];
        let w = [1.0, 2.0, 3.0];
        let i = [6.0, 7.0, 11.0];
        let flat = layout.pack(&[("w", &w), ("k", &k), ("I", &i)]).unwrap();
        assert_eq!(&flat[0..3], &k);
        assert_eq!(&flat[3..6], &w);
        assert_eq!(&flat[6..9], &i);
        let parts = layout.unpack(&flat).unwrap();
        assert_eq!(parts[0], ("k", &k[..]));
        assert_eq!(parts[2], ("I", &i[..]));
    }

    #[test]
    fn layout_rejects_bad_segments() {
        assert!(ParamLayout::new(&[("a", 0)]).is_err());
        assert!(ParamLayout::new(&[("a", 1), ("a", 2)]).is_err());
        let layout = ParamLayout::new(&[("a", 2)]).unwrap();
        assert!(layout.range("b").is_err());
        assert!(layout.pack(&[("a", &[1.0])]).is_err());
    }

    #[test]
    fn segments_are_disjoint_and_cover() {
        let layout = ParamLayout::new(&[("a", 2), ("b", 5), ("c", 1)]).unwrap();
        let mut covered = vec![false; layout.len()];
        for (_, range) in layout.segments() {
            for i in range {
                assert!(!covered[i], "overlapping segments");
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        assert_eq!(layout.segment_of(3), Some("b"));
        assert_eq!(layout.segment_of(7), Some("c"));
    }

    #[test]
    fn closed_loop_assembly_dimensions() {
        let schedule = SampleSchedule::uniform(0.0, 1.0, 3).unwrap();
        let sys: HybridSystem<f64> = assemble_closed_loop(
            12,
            4,
            |dx: &mut [f64], _x, _t, _th| {
                dx.fill(0.0);
                Ok(())
            },
            |_x, _t, _th| vec![0.0; 4],
            &schedule,
            |_th| vec![0.0; 16],
        )
        .unwrap();
        assert_eq!(sys.state_dim, 16);
        assert_eq!(sys.resets.len(), 1);

        let mut dx = vec![1.0; 16];
        (sys.rhs)(&mut dx, &vec![0.5; 16], 0.0, &[]).unwrap();
        // control segment derivative is exactly zero
        assert_eq!(&dx[12..], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_dimension_is_a_config_error() {
        let schedule = SampleSchedule::uniform(0.0, 1.0, 2).unwrap();
        let res: Result<HybridSystem<f64>, _> = assemble_closed_loop(
            0,
            4,
            |_dx: &mut [f64], _x, _t, _th| Ok(()),
            |_x, _t, _th| vec![],
            &schedule,
            |_th| vec![],
        );
        assert!(res.is_err());
    }
}
