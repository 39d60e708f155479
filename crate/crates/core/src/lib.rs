pub mod aggregator;
pub mod chunker;
pub mod data;
pub mod encoder;
pub mod error;
pub mod llm_client;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perplexity;
pub mod synthesis;
pub mod tensor;
#[doc(hidden)]
pub mod testing;
pub mod training;
pub mod tokenizer;

pub use error::{Error, Result};
