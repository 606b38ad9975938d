//! Weighted BCE + Dice objective.
//!
//! Both terms reduce over every pixel of the tensor they receive, so a batch
//! `B×1×H×W` is treated as one pool of `N = B·H·W` pixels.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub epsilon_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_bce: 0.5, lambda_dice: 0.5, epsilon_smooth: 1e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 || self.lambda_bce + self.lambda_dice <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got ({}, {})",
                self.lambda_bce, self.lambda_dice
            )));
        }
        if !(self.epsilon_smooth > 0.0) {
            return Err(Error::Config("epsilon_smooth must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over all elements, accumulated in f64 so that large pixel counts do
/// not pick up f32 summation error.
fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.to_dtype(DType::F64)?.mean_all()?.to_dtype(x.dtype())?)
}

fn sum_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.to_dtype(DType::F64)?.sum_all()?.to_dtype(x.dtype())?)
}

fn same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (gt * p.log()?)?;
    let neg = (gt.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok(mean_all(&(pos + neg)?)?.neg()?)
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_loss(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape(pred, gt)?;
    let inter = sum_all(&(pred * gt)?)?;
    let denom = ((sum_all(pred)? + sum_all(gt)?)? + eps)?;
    let coeff = ((inter * 2.0)? + eps)?.div(&denom)?;
    Ok(coeff.affine(-1.0, 1.0)?)
}

/// Scalar loss tensors of one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((f(&self.total)?, f(&self.bce)?, f(&self.dice)?))
    }
}

/// `λ_BCE·L_BCE + λ_Dice·L_Dice`.
pub fn total_loss(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let bce = bce_loss(pred, gt)?;
    let dice = dice_loss(pred, gt, w.epsilon_smooth)?;
    let total = ((&bce * w.lambda_bce)? + (&dice * w.lambda_dice)?)?;
    Ok(LossTerms { total, bce, dice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_cases() {
        let half = t(&[0.5; 64]);
        let gt: Vec<f32> = (0..64).map(|i| (i % 3 == 0) as u8 as f32).collect();
        assert!((s(bce_loss(&half, &t(&gt)).unwrap()) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(s(bce_loss(&t(&gt), &t(&gt)).unwrap()) <= 1.2e-6);
        let v = s(bce_loss(&t(&[0.9, 0.1]), &t(&[1.0, 0.0])).unwrap());
        assert!((v - 0.105_360_5).abs() < 1e-6);
    }

    #[test]
    fn dice_cases() {
        let eps = 1e-6;
        assert!(s(dice_loss(&t(&[1.0; 4]), &t(&[1.0; 4]), eps).unwrap()).abs() < 1e-6);
        let disjoint = s(dice_loss(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[0.0, 0.0, 1.0, 1.0]), eps).unwrap());
        assert!((disjoint - (1.0 - eps / (4.0 + eps))).abs() < 1e-6);
        let third = s(dice_loss(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[1.0, 0.0, 0.0, 0.0]), eps).unwrap());
        assert!((third - 1.0 / 3.0).abs() < 1e-6);
        let empty = s(dice_loss(&t(&[0.0; 4]), &t(&[0.0; 4]), eps).unwrap());
        assert!(empty.abs() < 1e-6 && empty.is_finite());
    }

    #[test]
    fn weighted_sum() {
        let pred = t(&[0.2, 0.7, 0.4, 0.9]);
        let gt = t(&[0.0, 1.0, 1.0, 0.0]);
        let b = s(bce_loss(&pred, &gt).unwrap());
        let d = s(dice_loss(&pred, &gt, 1e-6).unwrap());
        let half = total_loss(&pred, &gt, &LossWeights::default()).unwrap();
        assert!((s(half.total) - (0.5 * b + 0.5 * d)).abs() < 1e-6);
        let only_bce = LossWeights { lambda_bce: 1.0, lambda_dice: 0.0, ..Default::default() };
        assert!((s(total_loss(&pred, &gt, &only_bce).unwrap().total) - b).abs() < 1e-7);
        let only_dice = LossWeights { lambda_bce: 0.0, lambda_dice: 1.0, ..Default::default() };
        assert!((s(total_loss(&pred, &gt, &only_dice).unwrap().total) - d).abs() < 1e-7);
        assert!(LossWeights { lambda_bce: 0.0, lambda_dice: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(bce_loss(&t(&[0.5; 3]), &t(&[0.0; 4])), Err(Error::Dimension(_))));
        assert!(matches!(dice_loss(&t(&[0.5; 3]), &t(&[0.0; 4]), 1e-6), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradients_match_central_differences() {
        // f32 analytic gradient against an f64 central difference with h = 1e-3.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f32> = (0..64).map(|_| rng.random_range(0.05f32..0.95)).collect();
        let g: Vec<f32> = (0..64).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
        let dev = Device::Cpu;
        let pv = Var::from_slice(&p, (1, 8, 8), &dev).unwrap();
        let gt = Tensor::from_slice(&g, (1, 8, 8), &dev).unwrap();
        let w = LossWeights::default();
        let grads = total_loss(pv.as_tensor(), &gt, &w).unwrap().total.backward().unwrap();
        let analytic: Vec<f32> = grads.get(&pv).unwrap().flatten_all().unwrap().to_vec1().unwrap();

        let g64 = gt.to_dtype(candle_core::DType::F64).unwrap();
        let eval = |q: &[f64]| s(total_loss(&Tensor::from_slice(q, (1, 8, 8), &dev).unwrap(), &g64, &w).unwrap().total);
        let p64: Vec<f64> = p.iter().map(|v| *v as f64).collect();
        let h = 1e-3;
        for i in 0..64 {
            let mut up = p64.clone();
            let mut dn = p64.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let a = analytic[i] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "pixel {i}: analytic {a} vs fd {fd}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ranges_and_permutation_invariance(
                pairs in proptest::collection::vec((0.001f32..0.999, proptest::bool::ANY), 2..64),
                rot in 0usize..64,
            ) {
                let p: Vec<f32> = pairs.iter().map(|x| x.0).collect();
                let g: Vec<f32> = pairs.iter().map(|x| x.1 as u8 as f32).collect();
                let b = s(bce_loss(&t(&p), &t(&g)).unwrap());
                let d = s(dice_loss(&t(&p), &t(&g), 1e-6).unwrap());
                prop_assert!(b >= 0.0);
                prop_assert!((0.0..=1.0).contains(&d));
                let k = rot % p.len();
                let (mut pr, mut gr) = (p.clone(), g.clone());
                pr.rotate_left(k);
                gr.rotate_left(k);
                prop_assert!((s(bce_loss(&t(&pr), &t(&gr)).unwrap()) - b).abs() < 1e-6);
                prop_assert!((s(dice_loss(&t(&pr), &t(&gr), 1e-6).unwrap()) - d).abs() < 1e-6);
            }
        }
    }
}
