//! Multi-source sequence-to-sequence models with combined attention.
//!
//! Several encoders (bidirectional GRUs over token sequences, or affine
//! projections of feature grids) feed one recurrent decoder. At each step the
//! decoder combines the per-encoder attentions by concatenating contexts,
//! by a joint (flat) distribution over all encoder states, or hierarchically
//! with a second attention over per-encoder contexts. Flat and hierarchical
//! combination can add a sentinel candidate and can share the key and value
//! projections.
//!
//! Everything is computed in `f64` on a small reverse-mode graph so every
//! configuration can be checked against finite differences.

pub mod attention;
pub mod checkpoint;
pub mod combination;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
