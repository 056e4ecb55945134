pub mod archive;
pub mod autodiff;
pub mod blending;
pub mod config;
pub mod control;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod media;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Array;
