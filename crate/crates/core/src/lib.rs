//! XferBench-style scoring of token corpora by transfer to held-out
//! target-language modeling.

pub mod bench;
pub mod corpus;
mod error;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
