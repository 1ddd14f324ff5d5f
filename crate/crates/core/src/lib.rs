pub mod bench;
pub mod config;
pub mod edgebank;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod sampler;
pub mod selector;
pub mod ssm;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
