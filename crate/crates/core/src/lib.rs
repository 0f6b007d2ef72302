//! Disentangled multi-modal molecular representation learning.
//!
//! Three encoders (SMILES tokens, molecular graph, 3-D conformation) each
//! produce a pooled embedding. Per-modality variational heads split every
//! embedding into a shared and a private Gaussian latent; only the shared
//! latents are fused (softmax-gated, with a residual mean) and passed to
//! the prediction head. Training minimises the task loss plus five
//! regularisers with learnable positive weights.

pub mod chem;
pub mod disentangle;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
