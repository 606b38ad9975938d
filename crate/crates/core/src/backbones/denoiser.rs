//! Attention denoiser over noised latents, used as a forensic feature extractor.
//!
//! Every noised view runs through a conv stem and a stack of attention blocks
//! with an additive embedding of its timestep. The output of the tap block is
//! taken per view, views are concatenated along channels in level order, and a
//! trainable 1×1 projection consolidates them into `f_D`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::attention::{from_tokens, to_tokens, AttentionBlock};
use crate::error::{Error, Result};
use crate::lora::{AttentionNetwork, LoraLinear};
use crate::nn::{
    init_rng, silu, sincos_2d, sinusoidal_embedding, Conv2d, Init, LayerNorm, Linear, ParamBuilder, ParamStore,
};
use crate::noise_schedule::NoisedLatentSet;

/// Timesteps in `[0, 1]` are scaled by this before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    /// `C_D`
    pub out_channels: usize,
    /// Block whose output becomes the per-level feature.
    pub tap_layer: usize,
    pub weights_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            width: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            time_embed_dim: 64,
            out_channels: 64,
            tap_layer: 1,
            weights_seed: 0x5eed_5d3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("denoiser needs at least one attention block".into()));
        }
        if self.tap_layer >= self.depth {
            return Err(Error::Config(format!("tap_layer {} out of range for depth {}", self.tap_layer, self.depth)));
        }
        if self.width % 4 != 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("denoiser width must be divisible by 4 and time_embed_dim even".into()));
        }
        if self.out_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("denoiser channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub levels: usize,
    stem: Conv2d,
    time_fc1: Linear,
    time_fc2: Linear,
    pub blocks: Vec<AttentionBlock>,
    tap_norm: LayerNorm,
    consolidate: Conv2d,
}

impl Denoiser {
    /// Base weights go under `sd.*` frozen and drawn from `cfg.weights_seed`;
    /// the consolidation projection (`sd.consolidate.*`) is drawn from `rng` and
    /// is trainable when `train_consolidation` is set.
    pub fn new(
        cfg: &DenoiserConfig,
        levels: usize,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        train_consolidation: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if levels == 0 {
            return Err(Error::Config("denoiser needs at least one noise level".into()));
        }
        let mut wrng = init_rng(cfg.weights_seed);
        let mut b = ParamBuilder::new(store, &mut wrng, "sd", false);
        let d = cfg.width;
        let stem = Conv2d::new(
            &mut b.sub("stem"),
            cfg.latent_channels,
            d,
            3,
            1,
            1,
            Init::Normal((2.0 / (cfg.latent_channels * 9) as f64).sqrt()),
        )?;
        let te = cfg.time_embed_dim;
        let time_fc1 = Linear::new(&mut b.sub("time.fc1"), te, d, Init::Normal(1.0 / (te as f64).sqrt()))?;
        let time_fc2 = Linear::new(&mut b.sub("time.fc2"), d, d, Init::Normal(1.0 / (d as f64).sqrt()))?;
        let blocks = (0..cfg.depth)
            .map(|i| AttentionBlock::new(&mut b.sub(&format!("blocks.{i}")), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let tap_norm = LayerNorm::new(&mut b.sub("tap_norm"), d)?;
        drop(b);
        let mut cb = ParamBuilder::new(store, rng, "sd.consolidate", train_consolidation);
        let consolidate = Conv2d::new(&mut cb, levels * d, cfg.out_channels, 1, 1, 0, Init::FanInUniform(levels * d))?;
        Ok(Self { cfg: cfg.clone(), levels, stem, time_fc1, time_fc2, blocks, tap_norm, consolidate })
    }

    /// Tap-block features for a batch of latents at the given timesteps
    /// (one timestep per batch row): `N×width×H×W`.
    pub fn tap_features(&self, latents: &Tensor, t_effective: &[f64]) -> Result<Tensor> {
        let (n, c, h, w) = latents.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Dimension(format!(
                "denoiser expects {} latent channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        if t_effective.len() != n {
            return Err(Error::Dimension(format!("{} timesteps for {n} latents", t_effective.len())));
        }
        let dev = latents.device();
        let scaled: Vec<f64> = t_effective.iter().map(|t| t * TIME_SCALE).collect();
        let temb = sinusoidal_embedding(&scaled, self.cfg.time_embed_dim, dev)?.to_dtype(latents.dtype())?;
        let temb = self.time_fc2.forward(&silu(&self.time_fc1.forward(&temb)?)?)?.unsqueeze(1)?;
        let pos = sincos_2d(h, w, self.cfg.width, dev)?.to_dtype(latents.dtype())?;
        let mut x = to_tokens(&self.stem.forward(latents)?)?.broadcast_add(&pos)?.broadcast_add(&temb)?;
        for block in &self.blocks[..=self.cfg.tap_layer] {
            x = block.forward(&x)?;
        }
        from_tokens(&self.tap_norm.forward(&x)?, h, w)
    }

    /// Consolidated forensic features `f_D`: `B×C_D×H×W`.
    pub fn features(&self, noised: &NoisedLatentSet) -> Result<Tensor> {
        if noised.is_empty() {
            return Err(Error::Config("empty noised latent set".into()));
        }
        if noised.len() != self.levels {
            return Err(Error::Config(format!("denoiser consolidates {} levels, got {}", self.levels, noised.len())));
        }
        let first = noised.entries[0].latent.dims().to_vec();
        if noised.entries.iter().any(|e| e.latent.dims() != first.as_slice()) {
            return Err(Error::Dimension("noised latents differ in shape".into()));
        }
        let (b, _, h, w) = noised.entries[0].latent.dims4()?;
        let latents: Vec<&Tensor> = noised.entries.iter().map(|e| &e.latent).collect();
        let stacked = Tensor::cat(&latents, 0)?;
        let ts: Vec<f64> = noised.entries.iter().flat_map(|e| std::iter::repeat_n(e.t_effective, b)).collect();
        let taps = self.tap_features(&stacked, &ts)?;
        let d = self.cfg.width;
        let per_sample = taps.reshape((self.levels, b, d, h, w))?.transpose(0, 1)?.contiguous()?.reshape((
            b,
            self.levels * d,
            h,
            w,
        ))?;
        self.consolidate.forward(&per_sample)
    }
}

impl AttentionNetwork for Denoiser {
    fn attention_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn qkv_projections(&mut self) -> Vec<&mut LoraLinear> {
        self.blocks.iter_mut().flat_map(|b| b.qkv_mut()).collect()
    }

    fn base_param_count(&self) -> usize {
        self.stem.param_count()
            + self.time_fc1.param_count()
            + self.time_fc2.param_count()
            + self.blocks.iter().map(AttentionBlock::base_param_count).sum::<usize>()
            + self.tap_norm.param_count()
    }
}
