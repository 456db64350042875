//! Cost-sensitive classification of hierarchical, set-structured records.
//!
//! An agent acquires features of a sample one at a time, each with a price,
//! and stops to classify once further information is not worth its cost.

pub mod autodiff;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod model;
pub mod schema;
pub mod training;

/// Width of every object embedding.
pub const EMBED_DIM: usize = 64;
