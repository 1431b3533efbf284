//! Density-shaping stochastic nonlinear model predictive control.
//!
//! The toolkit propagates the probability density of a scalar stochastic
//! state with a conservative finite-volume Fokker-Planck solver, scores
//! densities against a reference with the Bhattacharyya coefficient and
//! Hellinger distance, and closes the loop with a receding-horizon
//! optimizer subject to input bounds, a state chance constraint, and a
//! stochastic Lyapunov decay constraint. A two-state exothermic CSTR
//! (concentration / temperature) ships as the built-in benchmark, together
//! with an Euler-Maruyama path simulator used for Monte Carlo validation
//! of the density propagation and of the closed loop.

pub mod config;
pub mod error;
pub mod export;
pub mod fp;
pub mod lyapunov;
pub mod metrics;
pub mod model;
pub mod mpc;
pub mod ocp;
pub mod sde;
pub mod validate;

pub use error::{Error, Result};
