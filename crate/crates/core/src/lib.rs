//! Desk-scale speech-language model laboratory.
//!
//! A synthetic, exactly invertible speech codec feeds a small decoder-only
//! transformer that reads and writes interleaved text and speech tokens.
//! Speech can be predicted one token per hidden state or in groups of `g`
//! tokens through parallel head slices, with prosody and content handled by
//! separate (decoupled) or shared (coupled) vocabularies.

pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
