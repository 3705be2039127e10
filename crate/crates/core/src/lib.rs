//! Layout-guided spatial-temporal attention for multi-attribute video editing.
//!
//! The crate is a small, exact reference for the attention mechanism and the
//! editing loop around it: condition maps built from per-frame attribute
//! layouts, positive/negative logit modulation over keys from every frame,
//! discrete prompt-token to region control in cross-attention, a toy
//! DDIM-style inversion/denoising pipeline with latent blending, and leakage
//! metrics computed from recorded attention maps.

pub mod cli;
pub mod correspondence;
pub mod error;
pub mod fixture;
pub mod layout;
pub mod metrics;
pub mod numerics;
pub mod pgm;
pub mod pipeline;
pub mod st_attention;
pub mod video;

pub use error::{Error, Result};
