pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
