//! Deterministic synthetic forgery datasets.
//!
//! Base images are procedural: a two-colour gradient, band-limited texture,
//! a few soft-edged ellipses and per-image Gaussian sensor noise. Forgeries
//! are applied to a random star-shaped polygon region:
//!
//! * `splice` pastes the region from an independently generated donor,
//! * `copymove` copies another part of the same image with a sub-pixel
//!   displacement (so the pasted texture is resampled),
//! * `removal` replaces the region with a masked Gaussian infill of its
//!   surroundings.
//!
//! On disk a dataset is `images/<id>.png`, `masks/<id>.png` (0/255) and a
//! `manifest.json` listing every sample's id, kind, seed and split.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor};

pub const MIN_FORGED_FRACTION: f64 = 0.02;
pub const MAX_FORGED_FRACTION: f64 = 0.5;
const REGION_TRIES: usize = 16;
/// Range of the per-image sensor noise σ.
const SENSOR_NOISE: (f64, f64) = (0.006, 0.035);
const DONOR_NOISE_RATIO: f64 = 2.5;
/// Mean polygon radius as a fraction of the image side.
const REGION_RADIUS: (f64, f64) = (0.18, 0.32);
pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeryKind {
    Splice,
    Copymove,
    Removal,
    Authentic,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 4] = [Self::Splice, Self::Copymove, Self::Removal, Self::Authentic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Splice => "splice",
            Self::Copymove => "copymove",
            Self::Removal => "removal",
            Self::Authentic => "authentic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgerySample {
    pub id: String,
    pub kind: ForgeryKind,
    pub split: Split,
    pub seed: u64,
    pub image: ImageTensor,
    pub mask: BinaryMask,
}

/// Proportions of each forgery kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KindMix {
    pub splice: f64,
    pub copymove: f64,
    pub removal: f64,
    pub authentic: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        Self { splice: 0.4, copymove: 0.3, removal: 0.2, authentic: 0.1 }
    }
}

impl KindMix {
    fn weights(&self) -> [f64; 4] {
        [self.splice, self.copymove, self.removal, self.authentic]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub mix: KindMix,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { train_count: 512, test_count: 64, image_size: 64, mix: KindMix::default(), seed: 7 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_count + self.test_count == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} is too small (min 16)", self.image_size)));
        }
        let w = self.mix.weights();
        if w.iter().any(|p| *p < 0.0 || !p.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("kind proportions must be non-negative and sum to 1, got {w:?}")));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }
}

/// Largest-remainder allocation of `count` samples over the kind mix
/// (ties broken by kind order).
pub fn allocate_kinds(count: usize, mix: &KindMix) -> [usize; 4] {
    let w = mix.weights();
    let exact: Vec<f64> = w.iter().map(|p| p * count as f64).collect();
    let mut alloc = [0usize; 4];
    for (a, e) in alloc.iter_mut().zip(&exact) {
        *a = (e + 1e-9).floor() as usize;
    }
    let mut left = count - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - alloc[a] as f64;
        let rb = exact[b] - alloc[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc
}

/// Stable per-sample seed: dataset seed xor the first 8 bytes of SHA-256(id).
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Ids, kinds and seeds of one split, in id order.
pub fn plan_split(spec: &DatasetSpec, split: Split) -> Vec<(String, ForgeryKind, u64)> {
    let count = spec.count(split);
    let alloc = allocate_kinds(count, &spec.mix);
    let mut kinds: Vec<ForgeryKind> =
        ForgeryKind::ALL.iter().zip(alloc).flat_map(|(k, n)| std::iter::repeat_n(*k, n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split.name()));
    // Fisher-Yates so kinds are interleaved deterministically
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let id = format!("{}_{i:05}", split.name());
            let seed = sample_seed(spec.seed, &id);
            (id, kind, seed)
        })
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

/// Procedural natural-looking image, `3×size×size`, values in `[0, 1]`.
pub fn gen_base_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    let sigma = rng.random_range(SENSOR_NOISE.0..SENSOR_NOISE.1);
    gen_base_image_with_noise(rng, size, sigma)
}

/// Sensor noise σ of a donor, at least `DONOR_NOISE_RATIO` away from the
/// base σ in either direction, so pasted content carries a foreign noise level.
fn donor_noise(rng: &mut ChaCha8Rng, base: f64) -> f64 {
    let (lo, hi) = SENSOR_NOISE;
    let up = base * DONOR_NOISE_RATIO;
    let down = base / DONOR_NOISE_RATIO;
    match (up < hi, down > lo) {
        (true, true) if rng.random_bool(0.5) => rng.random_range(up..hi),
        (true, _) => rng.random_range(up..hi),
        (_, true) => rng.random_range(lo..down),
        _ => {
            if base < (lo * hi).sqrt() {
                hi
            } else {
                lo
            }
        }
    }
}

/// [`gen_base_image`] with a given sensor noise σ.
pub fn gen_base_image_with_noise(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> ImageTensor {
    let mut img = ImageTensor::zeros(3, size, size);
    let n = size as f64;

    // low-frequency colour gradient
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());

    // band-limited texture: a handful of random plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.random_range(2.0..12.0) / n * std::f64::consts::TAU;
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0))
        })
        .collect();
    let tex_amp = rng.random_range(0.02..0.07);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));

    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / n - 0.5, (y as f64 + 0.5) / n - 0.5);
            let s = ((u * dx + v * dy) + 0.71) / 1.42;
            let tex: f64 =
                waves.iter().map(|(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum::<f64>()
                    / waves.len() as f64;
            for c in 0..3 {
                let val = c0[c] * (1.0 - s) + c1[c] * s + tex_amp * tint[c] * tex * 2.0;
                img.set(c, y, x, val as f32);
            }
        }
    }

    // soft-edged ellipses
    let shapes = rng.random_range(1..=4);
    for _ in 0..shapes {
        let (cx, cy) = (rng.random_range(0.1..0.9) * n, rng.random_range(0.1..0.9) * n);
        let (rx, ry) = (rng.random_range(0.08..0.3) * n, rng.random_range(0.08..0.3) * n);
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let (cr, sr) = (rot.cos(), rot.sin());
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let opacity = rng.random_range(0.5..0.95);
        let edge = rng.random_range(0.05..0.2);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (qx, qy) = (px * cr + py * sr, -px * sr + py * cr);
                let d = ((qx / rx).powi(2) + (qy / ry).powi(2)).sqrt();
                let a = opacity / (1.0 + ((d - 1.0) / edge).exp());
                for c in 0..3 {
                    let old = img.get(c, y, x) as f64;
                    img.set(c, y, x, (old * (1.0 - a) + color[c] * a) as f32);
                }
            }
        }
    }

    // per-image sensor noise
    for v in img.data_mut() {
        *v += gauss(rng, sigma) as f32;
    }
    img.clamp01();
    img
}

/// Random star-shaped polygon rasterized at pixel centers.
fn random_region(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let n = size as f64;
    let (cx, cy) = (rng.random_range(0.2..0.8) * n, rng.random_range(0.2..0.8) * n);
    let radius = rng.random_range(REGION_RADIUS.0..REGION_RADIUS.1) * n;
    let verts = rng.random_range(5..=9);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let poly: Vec<(f64, f64)> = (0..verts)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * (i as f64 + rng.random_range(-0.3..0.3)) / verts as f64;
            let r = radius * rng.random_range(0.7..1.3);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    let mut m = BinaryMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Blend weight per pixel: 1 inside, `FEATHER` on the inner boundary ring.
const FEATHER: f32 = 0.75;

fn blend_weights(mask: &BinaryMask) -> Vec<f32> {
    let inner = mask.interior();
    (0..mask.height() * mask.width())
        .map(|i| {
            let (y, x) = (i / mask.width(), i % mask.width());
            if !mask.get(y, x) {
                0.0
            } else if inner.get(y, x) {
                1.0
            } else {
                FEATHER
            }
        })
        .collect()
}

fn paste(base: &ImageTensor, patch: &ImageTensor, weights: &[f32]) -> ImageTensor {
    let mut out = base.clone();
    let plane = base.height() * base.width();
    for c in 0..base.channels() {
        for i in 0..plane {
            let w = weights[i];
            if w > 0.0 {
                let j = c * plane + i;
                out.data_mut()[j] = base.data()[j] * (1.0 - w) + patch.data()[j] * w;
            }
        }
    }
    out
}

fn bilinear_sample(img: &ImageTensor, c: usize, y: f64, x: f64) -> f32 {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let (y, x) = (y.clamp(0.0, h - 1.0), x.clamp(0.0, w - 1.0));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn bbox(mask: &BinaryMask) -> (usize, usize, usize, usize) {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0, x0, y1, x1)
}

fn splice(base: &ImageTensor, donor: &ImageTensor, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> ImageTensor {
    // take the donor content from a random offset (wrapping) so donor
    // composition is not aligned with the base
    let (h, w) = (base.height(), base.width());
    let (oy, ox) = (rng.random_range(0..h), rng.random_range(0..w));
    let mut patch = ImageTensor::zeros(base.channels(), h, w);
    for c in 0..base.channels() {
        for y in 0..h {
            for x in 0..w {
                patch.set(c, y, x, donor.get(c, (y + oy) % h, (x + ox) % w));
            }
        }
    }
    paste(base, &patch, &blend_weights(mask))
}

fn copy_move(base: &ImageTensor, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> Option<ImageTensor> {
    let (h, w) = (base.height() as f64, base.width() as f64);
    let (y0, x0, y1, x1) = bbox(mask);
    let min_shift = (w.min(h) / 8.0).max(2.0);
    for _ in 0..32 {
        // source = destination − d must stay inside the frame
        let dy = rng.random_range(-(h - 1.0)..(h - 1.0)).trunc() + rng.random_range(0.3..0.7);
        let dx = rng.random_range(-(w - 1.0)..(w - 1.0)).trunc() + rng.random_range(0.3..0.7);
        if dy.hypot(dx) < min_shift {
            continue;
        }
        let ok =
            y0 as f64 - dy >= 0.0 && y1 as f64 - dy <= h - 1.0 && x0 as f64 - dx >= 0.0 && x1 as f64 - dx <= w - 1.0;
        if !ok {
            continue;
        }
        let gain = rng.random_range(0.95..1.05) as f32;
        let mut patch = base.clone();
        for c in 0..base.channels() {
            for y in 0..base.height() {
                for x in 0..base.width() {
                    if mask.get(y, x) {
                        let v = bilinear_sample(base, c, y as f64 - dy, x as f64 - dx) * gain;
                        patch.set(c, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
        return Some(paste(base, &patch, &blend_weights(mask)));
    }
    None
}

fn removal(base: &ImageTensor, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> ImageTensor {
    // normalized convolution: Gaussian-weighted mean of unmasked pixels
    let sigma = rng.random_range(3.0..6.0);
    let radius = (3.0 * sigma as f64).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let (h, w) = (base.height(), base.width());
    let valid: Vec<f64> = (0..h * w).map(|i| (!mask.get(i / w, i % w)) as u8 as f64).collect();
    let blur = |plane: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = x as isize + k as isize - radius;
                    if (0..w as isize).contains(&xx) {
                        acc += kv * plane[y * w + xx as usize];
                    }
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = y as isize + k as isize - radius;
                    if (0..h as isize).contains(&yy) {
                        acc += kv * tmp[yy as usize * w + x];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let weight = blur(&valid);
    let mut patch = base.clone();
    for c in 0..base.channels() {
        let masked: Vec<f64> = base.plane(c).iter().zip(&valid).map(|(v, m)| *v as f64 * m).collect();
        let num = blur(&masked);
        let mean = base.plane(c).iter().map(|v| *v as f64).sum::<f64>() / (h * w) as f64;
        for i in 0..h * w {
            let v = if weight[i] > 1e-6 { num[i] / weight[i] } else { mean };
            patch.plane_mut(c)[i] = v as f32;
        }
    }
    paste(base, &patch, &blend_weights(mask))
}

/// Pixels whose value changed visibly (by more than half an 8-bit level in
/// some channel), restricted to the interior of `mask`.
pub fn changed_interior_fraction(before: &ImageTensor, after: &ImageTensor, mask: &BinaryMask) -> f64 {
    let inner = mask.interior();
    let n = inner.count();
    if n == 0 {
        return 1.0;
    }
    let mut changed = 0;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if inner.get(y, x)
                && (0..before.channels()).any(|c| (before.get(c, y, x) - after.get(c, y, x)).abs() > 0.5 / 255.0)
            {
                changed += 1;
            }
        }
    }
    changed as f64 / n as f64
}

/// Applies one forgery of `kind` to `base`. The returned image is quantized
/// to 8 bits and the mask marks exactly the altered region.
pub fn apply_forgery(
    base: &ImageTensor,
    donor: &ImageTensor,
    kind: ForgeryKind,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, BinaryMask)> {
    if base.shape() != donor.shape() {
        return Err(Error::Dimension(format!("base {:?} vs donor {:?}", base.shape(), donor.shape())));
    }
    let base = base.quantize8();
    let (h, w) = (base.height(), base.width());
    if kind == ForgeryKind::Authentic {
        return Ok((base, BinaryMask::zeros(h, w)));
    }
    for _ in 0..REGION_TRIES {
        let mask = random_region(rng, h.min(w));
        let frac = mask.fraction();
        if !(MIN_FORGED_FRACTION..=MAX_FORGED_FRACTION).contains(&frac) {
            continue;
        }
        let forged = match kind {
            ForgeryKind::Splice => Some(splice(&base, &donor.quantize8(), &mask, rng)),
            ForgeryKind::Copymove => copy_move(&base, &mask, rng),
            ForgeryKind::Removal => Some(removal(&base, &mask, rng)),
            ForgeryKind::Authentic => unreachable!(),
        };
        let Some(forged) = forged else { continue };
        let forged = forged.quantize8();
        if changed_interior_fraction(&base, &forged, &mask) >= 0.9 {
            return Ok((forged, mask));
        }
    }
    Err(Error::Domain(format!("could not place a valid {} region in {REGION_TRIES} tries", kind.name())))
}

/// Generates one sample from its planned id, kind and seed.
pub fn generate_sample(id: &str, kind: ForgeryKind, split: Split, seed: u64, size: usize) -> Result<ForgerySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(SENSOR_NOISE.0..SENSOR_NOISE.1);
    let base = gen_base_image_with_noise(&mut rng, size, sigma);
    let donor_sigma = donor_noise(&mut rng, sigma);
    let donor = gen_base_image_with_noise(&mut rng, size, donor_sigma);
    let (image, mask) = apply_forgery(&base, &donor, kind, &mut rng)?;
    Ok(ForgerySample { id: id.to_string(), kind, split, seed, image, mask })
}

/// All samples of a spec, train split first.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<ForgerySample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.train_count + spec.test_count);
    for split in [Split::Train, Split::Test] {
        for (id, kind, seed) in plan_split(spec, split) {
            out.push(generate_sample(&id, kind, split, seed, spec.image_size)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: ForgeryKind,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<ForgerySample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ForgerySample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

/// Writes `samples` (usually [`generate`]'s output) under `dir`.
pub fn write_samples(spec: &DatasetSpec, samples: &[ForgerySample], dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        write_bytes(&dir.join("images").join(format!("{}.png", s.id)), &encode_png(&s.image.to_rgb8()?)?)?;
        write_bytes(&dir.join("masks").join(format!("{}.png", s.id)), &encode_png(&s.mask.to_luma8())?)?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        samples: samples
            .iter()
            .map(|s| ManifestEntry { id: s.id.clone(), kind: s.kind, seed: s.seed, split: s.split })
            .collect(),
    };
    write_bytes(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Generates the dataset described by `spec` and writes it to `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ForgerySample>> {
    let samples = generate(spec)?;
    write_samples(spec, &samples, dir)?;
    Ok(samples)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format { id: MANIFEST.into(), msg: format!("cannot read {}: {e}", path.display()) })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format { id: MANIFEST.into(), msg: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format { id: MANIFEST.into(), msg: format!("unsupported version {}", manifest.version) });
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let fmt = |msg: String| Error::Format { id: e.id.clone(), msg };
        let img_path = dir.join("images").join(format!("{}.png", e.id));
        let mask_path = dir.join("masks").join(format!("{}.png", e.id));
        let img = image::open(&img_path).map_err(|err| fmt(format!("image {}: {err}", img_path.display())))?;
        let mask = image::open(&mask_path).map_err(|err| fmt(format!("mask {}: {err}", mask_path.display())))?;
        let image = ImageTensor::from_rgb8(&img.to_rgb8());
        let mask = BinaryMask::from_luma8(&mask.to_luma8());
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(fmt(format!(
                "image is {}x{} but mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        samples.push(ForgerySample { id: e.id.clone(), kind: e.kind, split: e.split, seed: e.seed, image, mask });
    }
    Ok(Dataset { spec: manifest.spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_rule() {
        let mix = KindMix::default();
        assert_eq!(allocate_kinds(100, &mix), [40, 30, 20, 10]);
        assert_eq!(allocate_kinds(64, &mix).iter().sum::<usize>(), 64);
        assert_eq!(allocate_kinds(7, &mix).iter().sum::<usize>(), 7);
        let spec = DatasetSpec { train_count: 100, test_count: 0, ..Default::default() };
        let plan = plan_split(&spec, Split::Train);
        let count = |k| plan.iter().filter(|p| p.1 == k).count();
        assert_eq!(
            [
                count(ForgeryKind::Splice),
                count(ForgeryKind::Copymove),
                count(ForgeryKind::Removal),
                count(ForgeryKind::Authentic)
            ],
            [40, 30, 20, 10]
        );
    }

    #[test]
    fn base_image_is_deterministic_and_varied() {
        let a = gen_base_image(&mut ChaCha8Rng::seed_from_u64(3), 64);
        let b = gen_base_image(&mut ChaCha8Rng::seed_from_u64(3), 64);
        let c = gen_base_image(&mut ChaCha8Rng::seed_from_u64(4), 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut bins = [false; 256];
        for v in a.data() {
            bins[crate::raster::to_u8(*v) as usize] = true;
        }
        assert!(bins.iter().filter(|b| **b).count() > 10);
    }

    #[test]
    fn forgeries_respect_invariants() {
        for (i, kind) in ForgeryKind::ALL.iter().enumerate() {
            for seed in 0..8u64 {
                let s = generate_sample("x", *kind, Split::Train, seed * 31 + i as u64, 64).unwrap();
                let frac = s.mask.fraction();
                if *kind == ForgeryKind::Authentic {
                    assert!(s.mask.is_empty());
                    continue;
                }
                assert!((MIN_FORGED_FRACTION..=MAX_FORGED_FRACTION).contains(&frac), "{kind:?} frac {frac}");
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                let base = gen_base_image(&mut rng, 64).quantize8();
                assert!(changed_interior_fraction(&base, &s.image, &s.mask) >= 0.9);
                // outside the mask nothing moved
                for y in 0..64 {
                    for x in 0..64 {
                        if !s.mask.get(y, x) {
                            for c in 0..3 {
                                assert_eq!(base.get(c, y, x), s.image.get(c, y, x));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mismatched_donor_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ImageTensor::zeros(3, 32, 32);
        let b = ImageTensor::zeros(3, 16, 16);
        assert!(matches!(apply_forgery(&a, &b, ForgeryKind::Splice, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn spec_validation() {
        let mut spec = DatasetSpec::default();
        assert!(spec.validate().is_ok());
        spec.mix.splice = 0.5;
        assert!(spec.validate().is_err());
        let empty = DatasetSpec { train_count: 0, test_count: 0, ..Default::default() };
        assert!(empty.validate().is_err());
    }
}
