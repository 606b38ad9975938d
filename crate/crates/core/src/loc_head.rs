//! Localization head: low-resolution logits upsampled by a fixed factor.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sigmoid, Conv2d, Init, ParamBuilder};

/// Upsampled logits are clamped to this magnitude so that `f32` sigmoid
/// outputs stay strictly inside `(0, 1)`.
pub const LOGIT_LIMIT: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// `C_mid`
    pub mid_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { mid_channels: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct LocalizationHead {
    conv: Conv2d,
    out: Conv2d,
    /// `S_up`, fixed at construction.
    pub upsample_scale: usize,
}

impl LocalizationHead {
    pub fn new(cfg: &HeadConfig, c_fuse: usize, upsample_scale: usize, b: &mut ParamBuilder) -> Result<Self> {
        if cfg.mid_channels == 0 || upsample_scale == 0 {
            return Err(Error::Config("head mid_channels and upsample scale must be positive".into()));
        }
        let conv = Conv2d::new(&mut b.sub("conv"), c_fuse, cfg.mid_channels, 3, 1, 1, Init::FanInUniform(c_fuse * 9))?;
        let out = Conv2d::new(&mut b.sub("out"), cfg.mid_channels, 1, 1, 1, 0, Init::FanInUniform(cfg.mid_channels))?;
        Ok(Self { conv, out, upsample_scale })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.out.param_count()
    }

    /// Hidden layer before its ReLU, `B×C_mid×H×W`. Exposed so gradient
    /// checks can tell when a perturbation crosses a ReLU kink.
    pub fn hidden(&self, f_fuse: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = f_fuse.dims4()?;
        if c != self.conv.c_in() {
            return Err(Error::Dimension(format!("head expects {} channels, got {c}", self.conv.c_in())));
        }
        self.conv.forward(f_fuse)
    }

    /// Low-resolution logits `B×1×H×W`.
    pub fn logits(&self, f_fuse: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden(f_fuse)?.relu()?)
    }

    /// Full-resolution probabilities from low-resolution logits.
    pub fn probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = logits.dims4()?;
        let s = self.upsample_scale;
        let up = resize_bilinear(logits, h * s, w * s)?.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)?;
        sigmoid(&up)
    }

    /// `M_pred = σ(upsample(H_conv(f_fuse)))`: `B×1×(H·S_up)×(W·S_up)`.
    pub fn predict_mask(&self, f_fuse: &Tensor) -> Result<Tensor> {
        self.probabilities(&self.logits(f_fuse)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};
    use candle_core::{DType, Device};

    fn head() -> LocalizationHead {
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = init_rng(2);
        let mut b = ParamBuilder::new(&mut store, &mut rng, "head", true);
        LocalizationHead::new(&HeadConfig::default(), 64, 8, &mut b).unwrap()
    }

    #[test]
    fn shape_and_range() {
        let h = head();
        let f = (Tensor::randn(0f32, 1.0, (2, 64, 8, 8), &Device::Cpu).unwrap() * 50.0).unwrap();
        let m = h.predict_mask(&f).unwrap();
        assert_eq!(m.dims(), &[2, 1, 64, 64]);
        let v: Vec<f32> = m.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn zero_logits_give_half() {
        let h = head();
        let z = Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let v: Vec<f32> = h.probabilities(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let h = head();
        let f = Tensor::full(0.7f32, (1, 64, 8, 8), &Device::Cpu).unwrap();
        // 3×3 zero padding only perturbs the border ring of the 8×8 logits;
        // the interior 6×6 logits are equal, so are their upsampled pixels.
        let logits = h.logits(&f).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        let inner: Vec<f32> =
            logits.narrow(0, 1, 6).unwrap().narrow(1, 1, 6).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(inner.iter().all(|v| (v - inner[0]).abs() < 1e-5));
        let c = Tensor::full(1.3f32, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let up: Vec<f32> = h.probabilities(&c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = 1.0 / (1.0 + (-1.3f32).exp());
        assert!(up.iter().all(|v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn raising_one_logit_never_lowers_output() {
        let h = head();
        let base = Tensor::randn(0f32, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let mut bumped: Vec<f32> = base.flatten_all().unwrap().to_vec1().unwrap();
        bumped[27] += 2.0;
        let bumped = Tensor::from_vec(bumped, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let a: Vec<f32> = h.probabilities(&base).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = h.probabilities(&bumped).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        assert!(a.iter().zip(&b).any(|(x, y)| y > x));
    }

    #[test]
    fn channel_mismatch() {
        let h = head();
        let f = Tensor::zeros((1, 32, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(h.predict_mask(&f), Err(Error::Dimension(_))));
    }
}
