//! Corpora, checkpoints, teacher caches and the distillation pipeline built
//! on [`structkd_core`].

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod potentials;
pub mod synthetic;
pub mod vocab;

pub use structkd_core as core;

pub use error::{Error, Result};
