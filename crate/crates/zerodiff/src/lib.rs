//! Desk-scale diffusion-based generative zero-shot learning.
//!
//! The pipeline has four stages: fine-tune and freeze feature/representation
//! extractors over raw vectors, train a diffusion-based representation
//! generator (DRG) against two Wasserstein critics, train a diffusion-based
//! feature generator (DFG) against three mutually-distilling critics, then
//! synthesize unseen-class samples and train/evaluate a final ZSL or GZSL
//! classifier.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod extractors;
pub mod io;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod trainer;
pub mod zsl;

pub use error::{Error, Result};
