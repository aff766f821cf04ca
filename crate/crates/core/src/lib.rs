pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod interpreter;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod scenegen;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
