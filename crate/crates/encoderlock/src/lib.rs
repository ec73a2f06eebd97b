//! EncoderLock: applicability authorization for pre-trained encoders.
//!
//! A pre-trained encoder served for probing (training a downstream head on
//! frozen features) can be redirected to domains its owner never intended.
//! This crate retrofits a "lock" onto such an encoder: it scores every
//! eligible weight by how much the prohibited domain depends on it relative
//! to the authorized domain, sparsely updates only the selected critical
//! weights under an L0 budget, and ships the attacker-side bench that
//! verifies the lock (probing heads, accuracy-drop metrics, PPI, and a
//! security verdict).
//!
//! Module map:
//! - [`weightspace`]: coordinate addressing, masked updates, and ΔW
//!   accounting over named parameter tensors.
//! - [`dws`]: domain-aware weight selection (gradient-magnitude-ratio
//!   scoring, top-N growth per round).
//! - [`losses`]: the lock losses — cross-entropy pair, the log-ratio
//!   regularizer, and the contrastive variant with its augmentation
//!   pipeline.
//! - [`locktrain`]: the supervised (self-challenging minimax) and
//!   unsupervised lock trainers.
//! - [`zeroshot`]: theme → prompts → synthetic images → similarity-driven
//!   prompt refinement, feeding the unsupervised trainer.
//! - [`probebench`]: the attacker simulator and scorekeeper.
//! - [`data`]: dataset registry, handles, and the procedural toy generator.
//! - [`nn`]: the small CPU training engine (conv/dense forward+backward)
//!   the rest of the crate is built on.
//!
//! Core numerics are generic over the scalar type via [`scalar::Scalar`];
//! [`Real`] is the default precision used by the trainers and the CLI.

pub mod data;
pub mod dws;
pub mod error;
pub mod losses;
pub mod locktrain;
pub mod nn;
pub mod probebench;
pub mod runio;
pub mod scalar;
pub mod seeds;
pub mod weightspace;
pub mod zeroshot;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar precision for training and the CLI.
///
/// Tests that need tight finite-difference tolerances instantiate the same
/// generic code with `f64` instead.
pub type Real = f32;
