pub mod csrc;
pub mod drift;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod policy;
pub mod quant;
pub mod scalar;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Moments = stats::RunningMoments<f64>;
