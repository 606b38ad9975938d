//! Post-processing attacks for robustness evaluation.
//!
//! Every attack maps a `[0, 1]` image to a `[0, 1]` image of the same shape.
//! Ground-truth masks are never touched.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

pub const JPEG_QUALITIES: [u8; 4] = [90, 70, 50, 30];
pub const NOISE_SIGMAS: [f32; 3] = [0.02, 0.05, 0.1];
pub const BLUR_SIGMAS: [f32; 3] = [0.5, 1.0, 2.0];
pub const RESIZE_FACTORS: [f32; 3] = [0.5, 0.75, 1.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Jpeg,
    GaussNoise,
    GaussBlur,
    Resize,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [Self::Jpeg, Self::GaussNoise, Self::GaussBlur, Self::Resize];

    pub fn name(self) -> &'static str {
        match self {
            Self::Jpeg => "jpeg",
            Self::GaussNoise => "gauss_noise",
            Self::GaussBlur => "gauss_blur",
            Self::Resize => "resize",
        }
    }

    /// Default intensity grid, mildest first.
    pub fn grid(self) -> Vec<f32> {
        match self {
            Self::Jpeg => JPEG_QUALITIES.iter().map(|q| *q as f32).collect(),
            Self::GaussNoise => NOISE_SIGMAS.to_vec(),
            Self::GaussBlur => BLUR_SIGMAS.to_vec(),
            Self::Resize => RESIZE_FACTORS.to_vec(),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Domain(format!("unknown attack '{s}' (expected jpeg, gauss_noise, gauss_blur or resize)"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attack {
    pub kind: AttackKind,
    pub param: f32,
}

impl Attack {
    pub fn new(kind: AttackKind, param: f32) -> Result<Self> {
        check_param(kind, param)?;
        Ok(Self { kind, param })
    }

    /// Applies the attack. `seed` is only used by `gauss_noise`.
    pub fn apply(&self, img: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        match self.kind {
            AttackKind::Jpeg => jpeg(img, self.param.round() as u8),
            AttackKind::GaussNoise => gauss_noise(img, self.param, seed),
            AttackKind::GaussBlur => gauss_blur(img, self.param),
            AttackKind::Resize => resize(img, self.param),
        }
    }
}

/// Accepted parameter ranges: jpeg quality 1..=100 (integral), noise σ in
/// [0, 1], blur σ in [0, 8] px, resize factor in [0.1, 4].
pub fn check_param(kind: AttackKind, p: f32) -> Result<()> {
    let ok = p.is_finite()
        && match kind {
            AttackKind::Jpeg => (1.0..=100.0).contains(&p) && p.fract() == 0.0,
            AttackKind::GaussNoise => (0.0..=1.0).contains(&p),
            AttackKind::GaussBlur => (0.0..=8.0).contains(&p),
            AttackKind::Resize => (0.1..=4.0).contains(&p),
        };
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!("unsupported {kind} parameter {p}")))
    }
}

/// One attack kind with its intensity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub grid: Vec<f32>,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, grid: Vec<f32>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Config(format!("empty intensity grid for {kind}")));
        }
        for p in &grid {
            check_param(kind, *p)?;
        }
        Ok(Self { kind, grid })
    }

    pub fn default_for(kind: AttackKind) -> Self {
        Self { kind, grid: kind.grid() }
    }

    pub fn all_defaults() -> Vec<Self> {
        AttackKind::ALL.into_iter().map(Self::default_for).collect()
    }
}

/// JPEG round trip at `quality` (standard 1 to 100 scale).
pub fn jpeg(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    check_param(AttackKind::Jpeg, quality as f32)?;
    let rgb = img.to_rgb8()?;
    let mut buf = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    rgb.write_with_encoder(enc)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    Ok(ImageTensor::from_rgb8(&decoded.to_rgb8()))
}

/// Additive white Gaussian noise, clamped to `[0, 1]`. σ = 0 is the identity.
pub fn gauss_noise(img: &ImageTensor, sigma: f32, seed: u64) -> Result<ImageTensor> {
    check_param(AttackKind::GaussNoise, sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f32 = StandardNormal.sample(&mut rng);
        *v += sigma * n;
    }
    out.clamp01();
    Ok(out)
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r).map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gauss_blur(img: &ImageTensor, sigma: f32) -> Result<ImageTensor> {
    check_param(AttackKind::GaussBlur, sigma)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    Ok(blur_with(img, &gaussian_kernel(sigma)))
}

fn blur_with(img: &ImageTensor, kernel: &[f32]) -> ImageTensor {
    let (c, h, w) = img.shape();
    let r = (kernel.len() / 2) as isize;
    let mut out = ImageTensor::zeros(c, h, w);
    let mut tmp = vec![0f32; h * w];
    for ch in 0..c {
        let src = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[y * w + reflect(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out.clamp01();
    out
}

fn resize_plane(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f32)
    };
    let mut out = vec![0f32; nh * nw];
    for y in 0..nh {
        let (y0, y1, fy) = coord(y, h, nh);
        for x in 0..nw {
            let (x0, x1, fx) = coord(x, w, nw);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * nw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Bilinear resize by `factor` and back to the original size.
pub fn resize(img: &ImageTensor, factor: f32) -> Result<ImageTensor> {
    check_param(AttackKind::Resize, factor)?;
    let (c, h, w) = img.shape();
    let nh = ((h as f32 * factor).round() as usize).max(1);
    let nw = ((w as f32 * factor).round() as usize).max(1);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let small = resize_plane(img.plane(ch), h, w, nh, nw);
        data.extend(resize_plane(&small, nh, nw, h, w));
    }
    let mut out = ImageTensor::new(c, h, w, data)?;
    out.clamp01();
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// One row of a robustness curve; `param` is `None` for the clean baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub attack: AttackKind,
    pub param: Option<f32>,
    pub f1: f64,
    pub iou: f64,
}

/// Evaluates `score` on clean inputs and at every intensity of `spec`,
/// giving `|grid| + 1` rows. `score` receives the attack (`None` for clean)
/// and returns `(f1, iou)`.
pub fn robustness_curve<F>(spec: &AttackSpec, mut score: F) -> Result<Vec<RobustnessRow>>
where
    F: FnMut(Option<Attack>) -> Result<(f64, f64)>,
{
    if spec.grid.is_empty() {
        return Err(Error::Config(format!("empty intensity grid for {}", spec.kind)));
    }
    let (f1, iou) = score(None)?;
    let mut rows = vec![RobustnessRow { attack: spec.kind, param: None, f1, iou }];
    for p in &spec.grid {
        let (f1, iou) = score(Some(Attack::new(spec.kind, *p)?))?;
        rows.push(RobustnessRow { attack: spec.kind, param: Some(*p), f1, iou });
    }
    Ok(rows)
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut s = String::from("attack,param,f1,iou\n");
    for r in rows {
        let param = r.param.map_or("clean".to_string(), |p| format!("{p}"));
        s.push_str(&format!("{},{param},{:.6},{:.6}\n", r.attack, r.f1, r.iou));
    }
    s
}
