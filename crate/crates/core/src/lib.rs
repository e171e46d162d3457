//! PPO-Clip with a proximal feature penalty, plus the diagnostics needed to
//! watch representations degrade: feature-rank metrics, dead neurons,
//! pre-activation norms, excess probability ratios and capacity loss.
//!
//! Everything runs on small MLPs and built-in toy environments, in `f64`,
//! with a dense reverse-mode differentiation engine of its own.

pub mod advantage;
pub mod autodiff;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod exec;
pub mod matrix;
pub mod networks;
pub mod optim;
pub mod ppo;
pub mod rng;
pub mod toy;

pub use error::{Error, Result};
pub use exec::Execution;
pub use matrix::Matrix;
