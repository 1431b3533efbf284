//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model evaluation left the declared domain or produced a
    /// non-finite value; the message names the offending coordinate.
    #[error("model domain: {0}")]
    ModelDomain(String),

    /// Finite-difference linearization failed (step underflow or
    /// non-finite differences).
    #[error("linearization: {0}")]
    Linearization(String),

    /// Invalid configuration; the message carries the field path.
    #[error("configuration: {0}")]
    Config(String),

    /// A simulated path produced a non-finite state.
    #[error("simulation diverged at t = {t} min: {detail}")]
    Divergence { t: f64, detail: String },

    /// Explicit time step violates the finite-volume stability bound.
    #[error("fp step size {dt} exceeds stability bound {bound}")]
    StepSize { dt: f64, bound: f64 },

    /// Probability-metric preconditions violated (e.g. grid mismatch).
    #[error("metric: {0}")]
    Metric(String),

    /// Lyapunov certificate construction or regeneration failed.
    #[error("certificate: {0}")]
    Certificate(String),

    /// Optimal control problem setup or evaluation failed.
    #[error("ocp: {0}")]
    Ocp(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
