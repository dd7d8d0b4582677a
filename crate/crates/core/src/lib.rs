pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod finetune;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod select;
pub mod sngp;
pub mod spectral;
pub mod synthetic;
pub mod tensor;
pub mod trunk;

pub use error::{Error, Result};
