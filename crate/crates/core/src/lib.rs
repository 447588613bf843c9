//! Optimal stochastic interventions for conjoint experiments.
//!
//! The crate estimates outcome models from forced-choice conjoint data,
//! finds regularized profile distributions that maximize expected outcomes
//! (in closed form or by gradient ascent), evaluates importance-weighted
//! estimators and their variance bounds, solves the two-party adversarial
//! game with primaries, and propagates uncertainty by the delta method or
//! an M-estimation sandwich. A Monte Carlo harness reproduces the
//! simulation studies.

pub mod ascent;
pub mod closed;
pub mod dataio;
pub mod design;
pub mod error;
pub mod estim;
pub mod exec;
pub mod game;
pub mod infer;
pub mod json;
pub mod mc;
pub mod model;

pub use error::{Error, Result};
pub use exec::Exec;
