//! Template-based search over pretrained-model registries.
//!
//! Candidate models and developer requests are both instances of one
//! 33-attribute template ([`metadata`]). Requests are matched against
//! candidates by per-field BM25 similarity on the trivial attributes
//! ([`similarity`]) and filtered by compatibility checks on the special
//! attributes ([`constraints`]); [`selection`] combines the two.

pub mod card;
pub mod config;
pub mod constraints;
pub mod evaluation;
pub mod extraction;
pub mod hub;
pub mod llm;
pub mod metadata;
pub mod pipeline;
pub mod selection;
pub mod similarity;
pub mod synthesis;
pub mod vocab;
