//! Stand-in networks: the frozen latent encoder, the attention denoiser over
//! noised latents, and the patch-token semantic encoder.

pub mod attention;
pub mod denoiser;
pub mod latent_encoder;
pub mod semantic;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use latent_encoder::{LatentEncoder, LatentEncoderConfig};
pub use semantic::{SemanticEncoder, SemanticEncoderConfig};
