//! A miniature image captioner that doubles as a zero-shot classifier.
//!
//! The decoder runs in two modes sharing one parameter set: conditioned on an
//! encoded image it gives `log P(T|I)`, conditioned on a learned null image it
//! gives the caption prior `log P(T)`. Candidates are then ranked by
//! `log P(T|I) − α·log P(T)`, which discounts captions that are merely common
//! in the training text.
//!
//! Modules, bottom-up:
//! - [`numerics`]: tensors, reverse-mode graph, Adam, checkpoints
//! - [`corpus`]: vocabulary, synthetic skewed-prior data, JSONL ingestion
//! - [`model`]: patch encoder plus dual-mode decoder
//! - [`training`]: multimodal, unimodal and weighted combined losses, train loop
//! - [`scoring`]: score matrices, prior caches, prior-corrected objectives
//! - [`evalharness`]: prompt voting, retrieval recalls, PCC diagnostics, α sweeps

pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
