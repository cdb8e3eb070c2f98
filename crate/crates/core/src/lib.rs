//! Constrained optimization of prefix and suffix token embeddings inserted
//! around a frozen prompt embedding, driven by a pluggable reward oracle.

pub mod augmentation;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod linalg;
pub mod optimizer;
pub mod parameterization;
pub mod protocol;
pub mod rewards;

pub use error::{Error, Result};
