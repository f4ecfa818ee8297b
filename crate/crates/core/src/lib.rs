pub mod autodiff;
pub mod blocks;
pub mod capsule;
pub mod components;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod severity;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
