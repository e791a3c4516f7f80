//! Corpus-in-context retrieval with compressed passages.
//!
//! The crate covers the whole loop around black-box model endpoints:
//! loading corpora, rendering long-context retrieval prompts, querying
//! models through a cached gateway, scoring retrievals, forging
//! chosen/rejected compression pairs from retrieval outcomes, and the
//! length-regularized odds-ratio objective those pairs train.

pub mod corpus;
pub mod experiment;
pub mod forge;
pub mod gateway;
pub mod metrics;
pub mod orpo;
pub mod prompt;
pub mod retrieval;
pub mod seed;
pub mod tokenizer;
