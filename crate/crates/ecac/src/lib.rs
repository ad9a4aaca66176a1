//! Actor-critic training stack for continuous control.
//!
//! The trainer pairs twin clipped double-Q critics with a diagonal-Gaussian
//! policy whose update is regularized toward the previous policy through a
//! cross-entropy penalty and an entropy bonus, both with automatically tuned
//! coefficients. Keeping consecutive policies close stabilizes the critics'
//! regression targets; the `diagnostics` module measures the resulting
//! Q-approximation error directly.
//!
//! Everything is self-contained: a reverse-mode autodiff tape over dense
//! `f64` arrays, small MLPs with an adaptive-moment optimizer, a uniform
//! replay buffer, three closed-form desk-scale environments, and a CLI
//! orchestrating training, ablations, evaluation, and chart rendering.

pub mod actor;
pub mod autodiff;
pub mod charts;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod gaussian;
pub mod metrics;
pub mod networks;
pub mod replay;
pub mod rng;
pub mod trainer;

pub use autodiff::{Array, Gradients, Tape, Var};
pub use error::{Error, Result};
