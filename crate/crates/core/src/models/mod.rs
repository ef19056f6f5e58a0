//! Forward models, terminal conditions and drivers, with the regularity
//! exponents that drive the rate predictions.

pub mod checks;
mod driver;
mod rates;
mod sde;
mod terminal;

pub use driver::{cut_driver, truncate, Driver, DriverExponents, DriverFn, DriverKind, ValueProvider};
pub use rates::{gamma_exponent, predicted_rate, RateInputs, RatePrediction, RateScheme};
pub use sde::{right_inverse, CoefficientFn, ColumnJacobianFn, SdeModel, DEFAULT_GRAM_CONDITION_LIMIT};
pub use terminal::{TerminalCondition, TerminalFn, TerminalKind};
