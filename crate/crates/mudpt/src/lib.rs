//! Desk-scale laboratory for multi-modal deep prompt tuning.
//!
//! A synthetic dual-encoder backbone (text and image Transformers projected
//! into a shared space), deep prompt stacks fused across modalities by a
//! cross-attention injection model, the baselines that fusion generalizes,
//! and seeded data generation plus evaluation protocols — all on dense `f64`
//! tensors with reverse-mode autodiff, so every gradient can be checked
//! against finite differences.

pub mod checkpoint;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod objective;
pub mod prompting;
pub mod rng;

pub use error::{Error, Result};
