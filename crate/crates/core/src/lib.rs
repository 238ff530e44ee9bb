//! Conditional diffusion editing on a procedural toy world.
//!
//! The pipeline encodes an image, inverts it with deterministic DDIM under
//! its source label, regenerates under a target label with classifier-free
//! guidance, and decodes. A directional-embedding finetuning loop sharpens
//! the target class. All evaluators (emotion classifier, identity embedder,
//! PSNR/SSIM) are trained or computed inside the crate on rendered toy faces.

pub mod denoiser;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod first_stage;
pub mod guidance_finetune;
pub mod io;
pub mod numerics;
pub mod schedule;
pub mod toyworld;

pub use error::{Error, Result};
