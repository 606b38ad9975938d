//! Trainable fusion of semantic features `f_S` with forensic features `f_D`.
//!
//! Pipeline: independent 1×1 projection + GroupNorm per input, channel
//! concatenation, 3×3 conv, GroupNorm, SiLU, 1×1 conv. When the two grids
//! differ, `f_S` is bilinearly resized to the grid of `f_D` first.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, silu, Conv2d, GroupNorm, Init, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Width of each projected input (`f'_S`, `f'_D`).
    pub proj_channels: usize,
    /// `C_fuse`
    pub fuse_channels: usize,
    pub groupnorm_groups: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { proj_channels: 48, fuse_channels: 64, groupnorm_groups: 8 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.groupnorm_groups;
        if g == 0 || self.proj_channels == 0 || self.fuse_channels == 0 {
            return Err(Error::Config("fusion channel counts and groups must be positive".into()));
        }
        if self.proj_channels % g != 0 || self.fuse_channels % g != 0 {
            return Err(Error::Config(format!(
                "{g} groups must divide proj_channels {} and fuse_channels {}",
                self.proj_channels, self.fuse_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub cfg: FusionConfig,
    proj_s: Conv2d,
    norm_s: GroupNorm,
    proj_d: Conv2d,
    norm_d: GroupNorm,
    conv: Conv2d,
    norm: GroupNorm,
    out: Conv2d,
}

impl Fusion {
    pub fn new(cfg: &FusionConfig, c_s: usize, c_d: usize, b: &mut ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let (p, f, g) = (cfg.proj_channels, cfg.fuse_channels, cfg.groupnorm_groups);
        let proj_s = Conv2d::new(&mut b.sub("proj_s"), c_s, p, 1, 1, 0, Init::FanInUniform(c_s))?;
        let norm_s = GroupNorm::new(&mut b.sub("norm_s"), g, p)?;
        let proj_d = Conv2d::new(&mut b.sub("proj_d"), c_d, p, 1, 1, 0, Init::FanInUniform(c_d))?;
        let norm_d = GroupNorm::new(&mut b.sub("norm_d"), g, p)?;
        let conv = Conv2d::new(&mut b.sub("conv"), 2 * p, f, 3, 1, 1, Init::FanInUniform(2 * p * 9))?;
        let norm = GroupNorm::new(&mut b.sub("norm"), g, f)?;
        let out = Conv2d::new(&mut b.sub("out"), f, f, 1, 1, 0, Init::FanInUniform(f))?;
        Ok(Self { cfg: cfg.clone(), proj_s, norm_s, proj_d, norm_d, conv, norm, out })
    }

    pub fn param_count(&self) -> usize {
        self.proj_s.param_count()
            + self.norm_s.param_count()
            + self.proj_d.param_count()
            + self.norm_d.param_count()
            + self.conv.param_count()
            + self.norm.param_count()
            + self.out.param_count()
    }

    /// `f_S`: `B×C_S×H_S×W_S`, `f_D`: `B×C_D×H×W` → `B×C_fuse×H×W`.
    pub fn fuse(&self, f_s: &Tensor, f_d: &Tensor) -> Result<Tensor> {
        let (bs, cs, hs, ws) = f_s.dims4()?;
        let (bd, cd, h, w) = f_d.dims4()?;
        if bs != bd {
            return Err(Error::Dimension(format!("batch sizes differ: f_S {bs}, f_D {bd}")));
        }
        if hs == 0 || ws == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension("fusion inputs need positive spatial size".into()));
        }
        if cs != self.proj_s.c_in() || cd != self.proj_d.c_in() {
            return Err(Error::Dimension(format!(
                "fusion built for C_S={} C_D={}, got {cs} and {cd}",
                self.proj_s.c_in(),
                self.proj_d.c_in()
            )));
        }
        let f_s = resize_bilinear(f_s, h, w)?;
        let s = self.norm_s.forward(&self.proj_s.forward(&f_s)?)?;
        let d = self.norm_d.forward(&self.proj_d.forward(f_d)?)?;
        let x = Tensor::cat(&[&s, &d], 1)?;
        let x = silu(&self.norm.forward(&self.conv.forward(&x)?)?)?;
        self.out.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};
    use candle_core::{DType, Device};

    fn build(c_s: usize, c_d: usize, cfg: &FusionConfig) -> Fusion {
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = init_rng(7);
        let mut b = ParamBuilder::new(&mut store, &mut rng, "fuse", true);
        Fusion::new(cfg, c_s, c_d, &mut b).unwrap()
    }

    #[test]
    fn shape_trace() {
        let f = build(32, 64, &FusionConfig::default());
        let fs = Tensor::randn(0f32, 1.0, (2, 32, 8, 8), &Device::Cpu).unwrap();
        let fd = Tensor::randn(0f32, 1.0, (2, 64, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(f.fuse(&fs, &fd).unwrap().dims(), &[2, 64, 8, 8]);
        // smaller semantic grid is resized to the forensic grid
        let fs4 = Tensor::randn(0f32, 1.0, (2, 32, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(f.fuse(&fs4, &fd).unwrap().dims(), &[2, 64, 8, 8]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let f = build(32, 64, &FusionConfig::default());
        let fs = Tensor::zeros((1, 16, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let fd = Tensor::zeros((1, 64, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(f.fuse(&fs, &fd), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_inputs_give_constant_interior() {
        // away from the zero-padded border only biases reach the output
        let f = build(32, 64, &FusionConfig::default());
        let fs = Tensor::zeros((1, 32, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let fd = Tensor::zeros((1, 64, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let y = f.fuse(&fs, &fd).unwrap().squeeze(0).unwrap();
        for c in 0..64 {
            let inner = y.get(c).unwrap().narrow(0, 1, 6).unwrap().narrow(1, 1, 6).unwrap();
            let v: Vec<f32> = inner.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|a| (a - v[0]).abs() < 1e-5), "channel {c} not constant");
        }
    }

    #[test]
    fn groups_must_divide() {
        let cfg = FusionConfig { proj_channels: 12, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn translation_shifts_the_interior() {
        // content surrounded by zero background, moved one pixel right; the
        // GroupNorm statistics see the same multiset of values either way
        let f = build(8, 8, &FusionConfig { proj_channels: 8, fuse_channels: 8, groupnorm_groups: 4 });
        let dev = Device::Cpu;
        let content = |c: usize, seed: u64| {
            let mut rng = init_rng(seed);
            let v: Vec<f32> = (0..c * 10 * 5).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            Tensor::from_vec(v, (1, c, 10, 5), &dev).unwrap()
        };
        let place = |t: &Tensor, left: usize| {
            let c = t.dim(1).unwrap();
            let l = Tensor::zeros((1, c, 10, left), DType::F32, &dev).unwrap();
            let r = Tensor::zeros((1, c, 10, 12 - 5 - left), DType::F32, &dev).unwrap();
            Tensor::cat(&[&l, t, &r], 3).unwrap()
        };
        let (cs, cd) = (content(8, 1), content(8, 2));
        let a = f.fuse(&place(&cs, 3), &place(&cd, 3)).unwrap();
        let b = f.fuse(&place(&cs, 4), &place(&cd, 4)).unwrap();
        let xa = a.narrow(3, 1, 9).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let xb = b.narrow(3, 2, 9).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in xa.iter().zip(&xb) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}
