pub mod complexity;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod sampler;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
