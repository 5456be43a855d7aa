//! Linear-quadratic mean field games whose agents carry state- and
//! control-dependent (multiplicative) noise.

pub mod error;
pub mod linalg;
pub mod meanfield;
pub mod nash_audit;
pub mod riccati;
pub mod simkit;
pub mod stability;

pub use error::{Error, Result};
