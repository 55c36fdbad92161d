//! Noise-robust voice conversion toolkit.
//!
//! The pipeline disentangles an utterance-level speaker embedding from a
//! per-frame content code, makes both noise-invariant through gradient
//! reversal against two domain classifiers, and reassembles speech with a
//! conditioned decoder. Everything runs on the CPU in deterministic f32 with
//! f64 loss reductions; a fixed seed reproduces runs bit for bit.

pub mod audio;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
