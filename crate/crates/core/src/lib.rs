//! Context-faithful long-form answer generation at desk scale.
//!
//! The crate builds sentence-level contrastive training data, trains a toy
//! language model with a combined generation and discrimination objective,
//! lets the model score its own sentences for faithfulness, and decodes with a
//! sentence-level beam search guided by those scores.

pub mod corpus;
pub mod error;
pub mod evolve;
pub mod harness;
pub mod inference;
pub mod lm;
pub mod objective;
pub mod prestage;
pub mod scoring;
pub mod treesample;
pub mod vocab;

pub use error::{Error, Result};
