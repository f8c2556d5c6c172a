//! Adversarial contrastive batch construction and two-stage contextual
//! document embeddings, sized to run on a laptop.
//!
//! The pipeline: load or synthesise query/document pairs, embed them with a
//! hashed TF-IDF surrogate, cluster pairs into hard pseudo-domains, pack the
//! clusters into fixed-size batches, mask likely false negatives, then train
//! either a plain biencoder or a contextual encoder and evaluate retrieval.

pub mod cluster;
pub mod config;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod experiment;
mod error;
pub mod filter;
pub mod pack;
pub mod par;
pub mod surrogate;
pub mod train;

pub use error::{Error, Result};
