//! Patch-token ViT standing in for the semantic image encoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::attention::{from_tokens, to_tokens, AttentionBlock};
use crate::error::{Error, Result};
use crate::lora::{AttentionNetwork, LoraLinear};
use crate::nn::{init_rng, sincos_2d, Conv2d, Init, LayerNorm, ParamBuilder, ParamStore};

/// Pixels are standardized as `(x − PIXEL_MEAN) / PIXEL_STD` before patching.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Variance gain of the patch embedding.
const PATCH_GAIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticEncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// `C_S`
    pub out_channels: usize,
    pub weights_seed: u64,
}

impl Default for SemanticEncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            out_channels: 32,
            weights_seed: 0x5eed_5a3,
        }
    }
}

impl SemanticEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.depth == 0 || self.out_channels == 0 {
            return Err(Error::Config("semantic encoder patch_size, depth and out_channels must be positive".into()));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!("embed_dim must be divisible by 4, got {}", self.embed_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub cfg: SemanticEncoderConfig,
    patch_embed: Conv2d,
    pub blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
    neck: Conv2d,
    neck_norm: LayerNorm,
}

impl SemanticEncoder {
    /// Frozen weights under `sam.*`, drawn from `cfg.weights_seed`.
    pub fn new(cfg: &SemanticEncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(cfg.weights_seed);
        let mut b = ParamBuilder::new(store, &mut rng, "sam", false);
        let d = cfg.embed_dim;
        let fan_in = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let patch_embed = Conv2d::new(
            &mut b.sub("patch_embed"),
            cfg.in_channels,
            d,
            cfg.patch_size,
            cfg.patch_size,
            0,
            Init::Normal((PATCH_GAIN / fan_in as f64).sqrt()),
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| AttentionBlock::new(&mut b.sub(&format!("blocks.{i}")), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut b.sub("norm"), d)?;
        let neck =
            Conv2d::new(&mut b.sub("neck"), d, cfg.out_channels, 1, 1, 0, Init::Normal(1.0 / (d as f64).sqrt()))?;
        let neck_norm = LayerNorm::new(&mut b.sub("neck_norm"), cfg.out_channels)?;
        Ok(Self { cfg: cfg.clone(), patch_embed, blocks, norm, neck, neck_norm })
    }

    /// `B×3×H×W` → `f_S`: `B×C_S×(H/p)×(W/p)`.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        let p = self.cfg.patch_size;
        if c != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "semantic encoder expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by patch size {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let pos = sincos_2d(gh, gw, self.cfg.embed_dim, image.device())?.to_dtype(image.dtype())?;
        let image = image.affine(1.0 / PIXEL_STD, -PIXEL_MEAN / PIXEL_STD)?;
        let mut x = to_tokens(&self.patch_embed.forward(&image)?)?.broadcast_add(&pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = from_tokens(&self.norm.forward(&x)?, gh, gw)?;
        let y = to_tokens(&self.neck.forward(&x)?)?;
        from_tokens(&self.neck_norm.forward(&y)?, gh, gw)
    }
}

impl AttentionNetwork for SemanticEncoder {
    fn attention_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn qkv_projections(&mut self) -> Vec<&mut LoraLinear> {
        self.blocks.iter_mut().flat_map(|b| b.qkv_mut()).collect()
    }

    fn base_param_count(&self) -> usize {
        self.patch_embed.param_count()
            + self.blocks.iter().map(AttentionBlock::base_param_count).sum::<usize>()
            + self.norm.param_count()
            + self.neck.param_count()
            + self.neck_norm.param_count()
    }
}
