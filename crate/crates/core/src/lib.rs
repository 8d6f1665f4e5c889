//! Multi-span extractive question answering over smart-home activity reports.
//!
//! The crate covers the whole pipeline: corpus generation, tokenization, a
//! small transformer encoder with hand-written backpropagation, the four
//! prediction heads, multitask training, routed decoding and evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tokenizer;
pub mod validate;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
