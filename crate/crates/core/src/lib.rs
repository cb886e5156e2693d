//! Numerical laboratory for free boundaries of one-dimensional finite-horizon
//! optimal stopping problems: an obstacle-problem PDE solver, a Monte Carlo
//! estimator for the time derivative of the stopping boundary built on a
//! Brownian path transformation, and a verifier for the induced Stefan
//! problem.

pub mod bessel;
pub mod error;
pub mod lambda;
pub mod model;
pub mod num;
pub mod pde;
pub mod rng;
pub mod stats;
pub mod stefan;

pub use error::{Error, Result};
pub use model::{
    american_call_spec, american_put_spec, custom_time_inhomogeneous_spec, DiffusionSpec,
    DiscountSpec, GainSpec, LampertiMap, Orientation, ProblemSpec, TerminalDensity,
    TerminalMeasure,
};
