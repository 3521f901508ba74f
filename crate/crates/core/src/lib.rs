pub mod autodiff;
pub mod blocks;
pub mod checks;
pub mod error;
pub mod fusion;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Real, Tensor};
