//! Normalizing flows on the rotation group SO(3).

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod so3;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
