//! Dual-branch forgery localization on CPU.
//!
//! A frozen latent encoder feeds noised latents to an attention denoiser
//! whose intermediate activations serve as forensic features; a patch-token
//! semantic encoder provides the second branch. Both are adapted with LoRA on
//! their query/key/value projections, fused, and decoded to a per-pixel
//! forgery mask.

pub mod attacks;
pub mod backbones;
pub mod error;
pub mod forgegen;
pub mod fusion;
pub mod harness;
pub mod loc_head;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod noise_schedule;
pub mod raster;

pub use error::{Error, Result};
