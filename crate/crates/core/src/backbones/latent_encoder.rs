//! Frozen convolutional map from image space to a low-resolution latent.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_rng, silu, Conv2d, Init, ParamBuilder, ParamStore};

/// Fixed gain ahead of the output tanh so that latents spread over a good
/// part of `(−1, 1)` instead of staying near zero.
const LATENT_GAIN: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentEncoderConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    /// Power of two; one stride-2 convolution per factor of two.
    pub downsample_factor: usize,
    pub hidden_channels: usize,
    pub weights_seed: u64,
}

impl Default for LatentEncoderConfig {
    fn default() -> Self {
        Self { in_channels: 3, latent_channels: 4, downsample_factor: 8, hidden_channels: 32, weights_seed: 0x5eed_0e0 }
    }
}

impl LatentEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor must be a power of two ≥ 2, got {f}")));
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("latent encoder channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
pub struct LatentEncoder {
    pub cfg: LatentEncoderConfig,
    convs: Vec<Conv2d>,
}

impl LatentEncoder {
    /// Registers the frozen weights under `ev.*`, drawn from `cfg.weights_seed`.
    pub fn new(cfg: &LatentEncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(cfg.weights_seed);
        let mut b = ParamBuilder::new(store, &mut rng, "ev", false);
        let layers = cfg.layers();
        let mut convs = Vec::with_capacity(layers);
        let mut c_in = cfg.in_channels;
        for i in 0..layers {
            let c_out = if i + 1 == layers { cfg.latent_channels } else { cfg.hidden_channels };
            let fan_in = (c_in * 9) as f64;
            let gain = if i + 1 == layers { 1.0 } else { 2.0 };
            let conv = Conv2d::new(
                &mut b.sub(&format!("conv{i}")),
                c_in,
                c_out,
                3,
                2,
                1,
                Init::Normal((gain / fan_in).sqrt()),
            )?;
            convs.push(conv);
            c_in = c_out;
        }
        Ok(Self { cfg: cfg.clone(), convs })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum()
    }

    /// `B×3×H×W` (or `3×H×W`) image → `B×C_z×(H/f)×(W/f)` latent in `(−1, 1)`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let batched = image.rank() == 4;
        let x = if batched { image.clone() } else { image.unsqueeze(0)? };
        let (_, c, h, w) = x.dims4()?;
        let f = self.cfg.downsample_factor;
        if c != self.cfg.in_channels {
            return Err(Error::Dimension(format!("latent encoder expects {} channels, got {c}", self.cfg.in_channels)));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by downsample factor {f}")));
        }
        // pixels are mapped from [0, 1] to [−1, 1] first
        let mut x = x.detach().affine(2.0, -1.0)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            x = if i + 1 == self.convs.len() { (x * LATENT_GAIN)?.tanh()? } else { silu(&x)? };
        }
        Ok(if batched { x } else { x.squeeze(0)? })
    }
}
