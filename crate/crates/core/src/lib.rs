//! Cross-lingual text-to-text pretraining laboratory.
//!
//! Builds the span-corruption and translation-pair pretraining tasks, trains a
//! small encoder-decoder transformer on them with grouped (partially
//! non-autoregressive) decoding, fine-tunes in text-to-text form with
//! constrained decoding, and computes the analysis metrics.

pub mod checkpoint;
pub mod corpus;
pub mod corruption;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod optim;
pub mod pnat;
pub mod tasks;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
