//! Differentiable expected calibration error (DECE) and online meta-learning
//! of calibration hyper-parameters.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod dece;
pub mod error;
pub mod fidelity;
pub mod io;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
