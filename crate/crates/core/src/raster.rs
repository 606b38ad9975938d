//! Plain CPU buffers for images and masks.
//!
//! The network modules work on `candle_core::Tensor`; data generation, attacks
//! and metrics work on these flat buffers, which convert to and from tensors
//! and 8-bit PNG images.

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense `C×H×W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Single channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Round every value to the nearest 8-bit level.
    pub fn quantize8(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Self { data, ..*self }
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.channels, self.height, self.width), device)?)
    }

    /// Accepts a `C×H×W` tensor (or `1×C×H×W`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::Dimension(format!("expected CxHxW tensor, got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data)
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::Dimension(format!("RGB export needs 3 channels, got {}", self.channels)));
        }
        let (h, w) = (self.height, self.width);
        Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| to_u8(self.get(c, y, x))))
        }))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        out
    }
}

/// Binary `H×W` mask; 1 marks forged pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!("mask buffer has {} values, expected {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Domain("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Pixels that are set and whose 4-neighbours are all set too.
    pub fn interior(&self) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.height, self.width);
        for y in 1..self.height.saturating_sub(1) {
            for x in 1..self.width.saturating_sub(1) {
                let on = self.get(y, x)
                    && self.get(y - 1, x)
                    && self.get(y + 1, x)
                    && self.get(y, x - 1)
                    && self.get(y, x + 1);
                out.set(y, x, on);
            }
        }
        out
    }

    /// Mask as `1×H×W` float tensor of 0/1.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(v, (1, self.height, self.width), device)?)
    }

    /// 0/255 grayscale image.
    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Any value ≥ 128 counts as forged.
    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let data = img.pixels().map(|p| (p.0[0] >= 128) as u8).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update(&self.data);
        to_hex(&h.finalize())
    }
}

/// Predicted forgery probabilities, `H×W` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "probability mask has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Accepts `H×W`, `1×H×W` or `1×1×H×W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut t = t.to_dtype(candle_core::DType::F32)?;
        while t.rank() > 2 {
            if t.dim(0)? != 1 {
                return Err(Error::Dimension(format!("expected a single mask, got {:?}", t.dims())));
            }
            t = t.squeeze(0)?;
        }
        let (h, w) = t.dims2()?;
        Self::new(h, w, t.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Probability scaled to 0..255.
    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([to_u8(self.data[y as usize * self.width + x as usize])])
        })
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_lossless_after_quantization() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 * 0.37).fract()).collect();
        let img = ImageTensor::new(3, 4, 5, data).unwrap().quantize8();
        let back = ImageTensor::from_rgb8(&img.to_rgb8().unwrap());
        assert_eq!(img, back);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::new(1, 3, vec![0, 1]).is_err());
    }

    #[test]
    fn interior_drops_boundary() {
        let mut m = BinaryMask::zeros(5, 5);
        for y in 1..4 {
            for x in 1..4 {
                m.set(y, x, true);
            }
        }
        let inner = m.interior();
        assert_eq!(inner.count(), 1);
        assert!(inner.get(2, 2));
    }
}
