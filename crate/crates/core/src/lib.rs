pub mod analysis;
pub mod cli;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod tensorops;

pub use error::{Error, Result};
