//! Iterate-averaged adaptive optimizers with a noisy-quadratic theory lab,
//! desk-scale classification tasks and diversity/sharpness diagnostics.

pub mod averaging;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod noisy_quadratic;
pub mod numerics;
pub mod optimizers;
pub mod parallel;
pub mod schedules;
pub mod tasks;

pub use error::{GavgError, Result};
pub use numerics::{ParamVector, ProbVector, RngStream};
pub use parallel::Parallelism;
