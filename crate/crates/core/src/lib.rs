//! Trains small network parametrizations, extracts their end-to-end linear
//! predictors, attacks them with projected gradient methods, and measures
//! predictors and perturbations in the Fourier domain.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linmap;
pub mod models;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
