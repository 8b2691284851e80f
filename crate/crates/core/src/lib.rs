//! Knowledge-grounded response generation with context-aware graph attention.
//!
//! The pipeline: retrieve commonsense triples for a post, aggregate them
//! hierarchically under context conditioning, and decode a response, with
//! training, evaluation and attention-analysis tooling around it.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gat;
pub mod kb;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod text;
pub mod training;

pub use error::{Error, Result};
