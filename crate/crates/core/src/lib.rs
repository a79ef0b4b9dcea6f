//! Core numerics for structure-level knowledge distillation of linear-chain
//! CRF sequence labelers.
//!
//! Everything here is pure computation over in-memory values and builds
//! without `std` (an allocator is required). File formats, corpora and the
//! training driver live in the `structkd` crate.
//!
//! All lattice inference runs in log-space: a potential is
//! `emission[pos][cur] + transition[prev][cur]` and is never exponentiated
//! except when producing probabilities.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod encoder;
mod error;
pub mod kbest;
pub mod lattice;
pub mod losses;
pub mod math;
mod matrix;
pub mod metrics;
pub mod objective;
pub mod optim;
mod tagset;

pub use encoder::{ModelDims, ModelParams, OutputHead, Sentence, TokenBatch};
pub use error::{Error, Result};
pub use kbest::{kbest_viterbi, viterbi, KBestEntry, KBestList};
pub use lattice::{
    backward_scores, forward_scores, log_partition, nll_and_grad, posteriors, sequence_log_prob,
    LabelSequence, Lattice, LatticeGrad, PosteriorMatrix, Prev,
};
pub use losses::{InterpolationState, KdLossKind, KdTarget};
pub use matrix::Matrix;
pub use tagset::Tagset;
