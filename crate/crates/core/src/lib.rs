pub mod attention;
pub mod backbones;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod noise;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
