pub mod body;
pub mod caption;
pub mod cli;
pub mod curation;
pub mod dataset;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod structure;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
