//! Differentiation of losses through the hybrid simulation.
//!
//! The primary path is the reverse-mode tape ([`Var`]); forward-mode
//! duals ([`Dual`]) and central differences serve as independent
//! oracles. All three run the same generic kernels.

pub mod forward;
pub mod grad;
pub mod tape;

pub use forward::Dual;
pub use grad::{
    event_time_sensitivity, grad_fd, grad_fd_subset, grad_forward, grad_forward_full,
    grad_reverse, grad_reverse_with_budget, ScalarLoss, FORWARD_BLOCK,
    TRANSVERSALITY_THRESHOLD,
};
pub use tape::{record_gradient, Recording, TapeStats, Var, DEFAULT_NODE_BUDGET};
