//! Multi-source multi-task pedestrian classifier, built from scratch.
//!
//! The crate trains a small convolutional network on image patches drawn
//! from several datasets at once. Every patch carries a 19-bit label
//! vector plus an observation mask: the main pedestrian bit, pedestrian
//! attributes, and scene attributes, with bits a source never annotates
//! masked out of both the loss and the gradient. Around that core sit
//! the supporting pieces: structure projection vectors (hierarchical
//! k-means over HOG space), an RBM that reweights samples by joint
//! likelihood, importance coefficients fit by L-BFGS, a hard-negative
//! miner, and a miss-rate evaluation kit. Everything runs end to end on
//! deterministic synthetic data through the `tacnn` CLI.

// Indexed loops over several same-length arrays at once are the clearest
// way to write the hand-rolled numerics here.
#![allow(clippy::needless_range_loop)]
// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffs;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod model;
pub mod nn;
pub mod rbm;
pub mod rng;
pub mod spv;
pub mod taskcodec;
pub mod tensor;
pub mod trainer;

pub mod cli;

pub use error::Error;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, Error>;
