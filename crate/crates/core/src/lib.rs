//! Content-conditioned text generation on top of a frozen decoder-only
//! language model.
//!
//! A small GPT-style model is split into a lower feature extractor and an
//! upper head. A single trainable transformer block sits between them and
//! rewrites the hidden states of the continuation by attending over the
//! representations of one or more content texts. The block is trained with
//! self-reconstruction, null-content, cycle-reconstruction and adversarial
//! objectives while the base model stays frozen.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
