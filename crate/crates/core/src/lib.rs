pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod inference;
pub mod params;
pub mod pipeline;
pub mod pretzel;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use params::{Group, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Matrix;
