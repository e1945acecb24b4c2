//! Error types shared across the crate.

use thiserror::Error;

/// Failure reported by a user-supplied right-hand side.
#[derive(Debug, Clone, Error)]
#[error("{message}")]
pub struct RhsError {
    pub message: String,
}

impl RhsError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }
}

/// Errors raised while assembling systems, layouts, or schedules.
#[derive(Debug, Clone, Error)]
pub enum ConfigError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid parameter layout: {0}")]
    InvalidLayout(String),
    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Errors raised by integration and event handling.
#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("right-hand side failed at t={t}, dt={dt}: {message}")]
    RhsFailure { t: f64, dt: f64, message: String },
    #[error("non-finite state at t={t}, dt={dt}")]
    NonFiniteState { t: f64, dt: f64 },
    #[error("non-finite derivative at t={t}, dt={dt}")]
    NonFiniteDerivative { t: f64, dt: f64 },
    #[error("step size {dt} underflowed the minimum {dt_min} at t={t}")]
    StepSizeUnderflow { t: f64, dt: f64, dt_min: f64 },
    #[error("exceeded the step budget of {max_steps} steps at t={t}")]
    MaxStepsExceeded { t: f64, max_steps: usize },
    #[error("reset of guard {guard} returned a non-finite state at t={t}")]
    ResetFailure { guard: usize, t: f64 },
    #[error("reset of guard {guard} returned {got} states, expected {expected}")]
    ResetDimension { guard: usize, got: usize, expected: usize },
    #[error("no sign change of guard {guard} in step [{t0}, {t1}]")]
    NoSignChange { guard: usize, t0: f64, t1: f64 },
    #[error("guard {guard} evaluated to a non-finite value at t={t}")]
    NonFiniteGuard { guard: usize, t: f64 },
    #[error("grazing event of guard {guard} at t={t}: |dg/dt| = {gdot} below the transversality threshold")]
    GrazingEvent { guard: usize, t: f64, gdot: f64 },
    #[error("dense evaluation time {tau} outside the step [{t0}, {t1}]")]
    DenseOutOfRange { tau: f64, t0: f64, t1: f64 },
    #[error("initial state has {got} components, expected {expected}")]
    InitialStateDimension { got: usize, expected: usize },
}

/// Errors raised by gradient drivers and the tape.
#[derive(Debug, Clone, Error)]
pub enum AdError {
    #[error("a recording tape is already active on this thread")]
    TapeBusy,
    #[error("tape budget exceeded: {nodes} nodes recorded, roughly {bytes} bytes required")]
    TapeBudget { nodes: usize, bytes: usize },
    #[error("tangent seed has {got} directions, expected {expected}")]
    SeedDimension { got: usize, expected: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Errors raised by the training and reporting layer.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trajectory {trajectory} failed to simulate: {source}")]
    Trajectory { trajectory: usize, source: SimError },
    #[error("non-finite loss at iteration {iteration} (restart seed {seed})")]
    NonFiniteLoss { iteration: usize, seed: u64 },
    #[error("non-finite gradient at iteration {iteration} in segment `{segment}`")]
    NonFiniteGradient { iteration: usize, segment: String },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("i/o failure on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

impl TrainError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn malformed(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Malformed { path: path.into(), message: message.into() }
    }
}
