pub mod analysis;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod nn;
pub mod optim;
pub mod refnet;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod tsampler;

pub use error::{Error, Result};
