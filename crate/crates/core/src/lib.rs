//! Desk-scale vision-language pipeline for radiology knowledge-graph triplets.
//!
//! A tiny decoder-only language model is instruction-tuned to emit
//! `(subject, relation, object)` triplets from report text, optionally
//! conditioned on an image feature vector through a transformer projector
//! that produces prefix embeddings. Generations are scored with exact BLEU and
//! ROUGE-L and diffed against gold graphs.

pub mod corpus;
pub mod decoder;
pub mod kg_schema;
pub mod lm;
pub mod metrics;
pub mod projector;
pub mod tensor;
pub mod trainer;
pub mod vision;

mod error;
pub mod rng;

pub use error::{Error, Result};
