//! Range, velocity and pose observers for a camera-IMU robot tracking point
//! features, built on linear regression equations in the unknown initial range.
//!
//! Modules, bottom-up:
//!
//! * [`lie3`]: SO(3) helpers.
//! * [`ode`]: RK4 with sampled inputs.
//! * [`filters`]: the stable filters `G₁`, `G₂`.
//! * [`simulator`]: ground truth and noisy sensor streams.
//! * [`regression`]: scalar and matrix regressors.
//! * [`observers`]: gradient, PEBO and DREM-based observers.
//! * [`excitation`]: Gram-matrix diagnostics.
//! * [`scenarios`]: JSON scenarios and end-to-end runs.

pub mod error;
pub mod excitation;
pub mod filters;
pub mod lie3;
pub mod observers;
pub mod ode;
pub mod regression;
pub mod scenarios;
pub mod simulator;

pub use error::{Error, Result};
