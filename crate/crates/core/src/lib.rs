//! Dense detection with a variational treatment of box regression.

pub mod distributions;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod pseudo_likelihood;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
