//! Hierarchical brain–vision alignment.
//!
//! Multiple visual encoder embeddings are fused into one shared space, a
//! brain-signal encoder is aligned to that space with a symmetric
//! temperature-scaled InfoNCE objective, and a fusion prior maps fused (or
//! brain) embeddings to conditions for a diffusion denoiser. Everything runs
//! on a small `f64` reverse-mode engine so gradients can be checked against
//! finite differences.

pub mod align;
pub mod brainproj;
pub mod cli;
pub mod databank;
pub mod error;
pub mod evalsuite;
pub mod fusion;
pub mod ndgrad;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
