//! Discretization schemes for Markovian BSDEs with locally Lipschitz drivers.
//!
//! The crate provides the explicit Euler scheme and the Malliavin-weights
//! scheme on graded time grids, the forward path machinery they need
//! (tangent flows, Malliavin derivatives and weights), interchangeable
//! conditional-expectation backends, closed-form and brute-force reference
//! solutions, and the error functionals used to measure convergence rates.

pub mod condexp;
pub mod error;
pub mod grids;
mod linalg;
pub mod metrics;
pub mod models;
pub mod normal;
pub mod oracle;
pub mod paths;
pub mod rng;
pub mod schemes;
mod stats;

pub use error::{Error, Result};
pub use grids::{beta_constant, make_grid, BoundCheck, TimeGrid};
