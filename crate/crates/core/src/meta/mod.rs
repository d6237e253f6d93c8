//! Online meta-learning of calibration hyper-parameters and the training
//! driver built around it.

mod ablation;
mod config;
mod report;
mod step;
mod train;

pub use ablation::*;
pub use config::*;
pub use report::*;
pub use step::*;
pub use train::*;
