//! Joint diffusion over an image, a continuous scalar and a categorical
//! variable, with zero-shot conditional sampling by fixing any subset of them.

pub mod autograd;
pub mod categorical;
pub mod denoiser;
pub mod error;
pub mod gaussian;
pub mod joint;
pub mod sampler;
pub mod schedule;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
