//! One-shot relational matching for knowledge-graph link prediction.
//!
//! Given a single reference triple `(h0, r, t0)` of a relation never seen during
//! training, the matcher ranks candidate tails for new queries `(h, r, ?)` by
//! comparing neighbor encodings of the query pair against the reference pair.
//!
//! Module map:
//!
//! - [`graph`]: triple ingestion, vocabularies, background graph, candidate sets
//! - [`dataset`]: task-relation selection, meta splits, task files on disk
//! - [`diff`]: a small reverse-mode autodiff tape, Adam and checkpoints
//! - [`embeddings`]: TransE / DistMult / ComplEx / RESCAL baselines and export
//! - [`matcher`]: neighbor encoder and recurrent matching processor
//! - [`trainer`]: episodic one-shot meta-training
//! - [`eval`]: ranking, MRR / Hits@K and k-shot fusion
//! - [`config`]: run configuration with recorded defaults
//! - [`synthetic`]: generator for a planted-signature toy knowledge graph

pub mod config;
pub mod dataset;
pub mod diff;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matcher;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
