//! Differentiable simulation of hybrid dynamical systems and closed-loop
//! system identification.
//!
//! The crate simulates piecewise-continuous dynamics with guard-triggered
//! resets using an adaptive Tsit5 integrator, backpropagates loss
//! gradients through the solver steps and resets (differentiate-the-
//! discretization), and drives a quad-rotor identification experiment:
//! physical-parameter estimation and neural-network drag models trained
//! from noisy closed-loop position data.
//!
//! Module map:
//! - [`hybrid`]: the hybrid-system abstraction, parameter layouts, and
//!   closed-loop assembly with a zero-order-hold controller.
//! - [`integrator`]: Tsit5 stepping, dense output, adaptive solve.
//! - [`events`]: guard localization and reset application.
//! - [`autodiff`]: tape reverse mode, forward duals, finite differences.
//! - [`learn`]: dense networks and the ADAM optimizer.
//! - [`quadrotor`]: the plant, controller design, and drag models.
//! - [`experiment`]: data generation, losses, training, reporting.

pub mod autodiff;
pub mod error;
pub mod events;
pub mod experiment;
pub mod hybrid;
pub mod integrator;
pub mod learn;
pub mod quadrotor;
pub mod scalar;

pub use autodiff::{grad_fd, grad_forward, grad_forward_full, grad_reverse, Dual, ScalarLoss, Var};
pub use error::{AdError, ConfigError, RhsError, SimError, TrainError};
pub use hybrid::{
    assemble_closed_loop, Guard, HybridSystem, ParamLayout, ParameterVector, ResetRule,
    SampleSchedule,
};
pub use integrator::{
    adaptive_solve, dense_eval, step_tsit5, SolveOptions, StepRecord, Trajectory,
};
pub use scalar::Scalar;
