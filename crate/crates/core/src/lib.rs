//! Code suggestion with identifier-aware neural language models.
//!
//! The pipeline: [`pylex`] tokenizes Python source, [`pynorm`] anonymizes the
//! identifiers a file introduces, [`corpus`] builds vocabularies and batched
//! training streams, [`ngram`] and [`neural`] provide the models and [`eval`]
//! measures perplexity and top-k accuracy split by identifier targets.

pub mod par;
pub mod pylex;
pub mod pynorm;
pub mod corpus;
pub mod ngram;
pub mod tensor;
pub mod neural;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod synth;
