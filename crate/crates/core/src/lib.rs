//! Distance-preserving variational autoencoders for spatially resolved
//! expression data.

pub mod autodiff;
pub mod distortion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
