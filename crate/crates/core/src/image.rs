//! Pixel containers passed between the defense stages.
//!
//! Images are stored row-major in HWC order with values in `[0, 1]`.
//! Masks are single-plane `H×W` arrays. Tensor conversions produce the
//! NCHW layout the networks expect.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image, checking buffer length, channel count and range.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::from_raw(height, width, channels, pixels)?.validate()
    }

    /// Builds an image checking only that the buffer matches the dimensions.
    pub fn from_raw(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!("zero-sized image {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// Returns the image unchanged when every invariant holds.
    pub fn validate(self) -> Result<Self> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Shape(format!("{} channels, expected 1 or 3", self.channels)));
        }
        if let Some((i, v)) = self
            .pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Range(format!("pixel {i} = {v}")));
        }
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[self.index(row, col, ch)]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let i = self.index(row, col, ch);
        self.pixels[i] = value.clamp(0.0, 1.0);
    }

    pub fn same_spatial(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// `(1, C, H, W)` tensor with values rescaled to the `[-1, 1]` diffusion convention.
    pub fn to_diffusion_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(self.to_unit_tensor(device)?.affine(2.0, -1.0)?)
    }

    /// `(1, C, H, W)` tensor in the `[0, 1]` pixel convention.
    pub fn to_unit_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?)
    }

    /// Inverse of [`Image::to_diffusion_tensor`]; clamps back into range.
    pub fn from_diffusion_tensor(t: &Tensor) -> Result<Self> {
        Self::from_unit_tensor(&t.affine(0.5, 0.5)?)
    }

    /// Reads a `(1, C, H, W)` or `(C, H, W)` tensor in pixel convention, clamping into `[0, 1]`.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("rank-{r} tensor is not an image"))),
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1()?;
        let pixels = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(h, w, c, pixels)
    }

    /// Mean absolute difference over every element.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same(other)?;
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(s / self.pixels.len() as f64)
    }

    pub fn check_same(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }
}

/// Real-valued per-pixel map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for {height}x{width} mask", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Range(format!("soft mask value {v}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, 1, self.height, self.width), device)?)
    }
}

impl From<&BinaryMask> for SoftMask {
    fn from(m: &BinaryMask) -> Self {
        Self {
            height: m.height,
            width: m.width,
            values: m.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// `H×W` mask with every element exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for {height}x{width} mask", values.len())));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Range("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![1; height * width] }
    }

    /// Axis-aligned rectangle of ones, clipped to the mask bounds.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut m = Self::zeros(height, width);
        for r in top..(top + h).min(height) {
            for c in left..(left + w).min(width) {
                m.values[r * width + c] = 1;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total element count `H·W`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// Every pixel set in `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.values.iter().zip(&other.values).all(|(&a, &b)| a <= b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.values.iter().zip(&other.values).filter(|(&a, &b)| a == 1 && b == 1).count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.values.iter().zip(&other.values).filter(|(&a, &b)| a == 1 || b == 1).count()
    }

    /// Intersection over union; two empty masks count as a perfect match.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let u = self.union_count(other);
        if u == 0 {
            1.0
        } else {
            self.intersection_count(other) as f64 / u as f64
        }
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?)
    }
}

/// Validates an image, returning it unchanged when all invariants hold.
pub fn validate_image(img: Image) -> Result<Image> {
    img.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_image_validates_unchanged() {
        let img = Image::from_raw(8, 8, 3, vec![0.0; 192]).unwrap();
        assert_eq!(validate_image(img.clone()).unwrap(), img);
    }

    #[test]
    fn out_of_range_pixel_is_range_error() {
        let mut px = vec![0.2; 192];
        px[17] = 1.5;
        let img = Image::from_raw(8, 8, 3, px).unwrap();
        assert!(matches!(validate_image(img), Err(Error::Range(_))));
    }

    #[test]
    fn four_channels_is_shape_error() {
        let img = Image::from_raw(8, 8, 4, vec![0.0; 256]).unwrap();
        assert!(matches!(validate_image(img), Err(Error::Shape(_))));
    }

    #[test]
    fn diffusion_tensor_round_trip() {
        let px: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
        let img = Image::new(4, 4, 3, px).unwrap();
        let t = img.to_diffusion_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 4]);
        let back = Image::from_diffusion_tensor(&t).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn binary_mask_rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        let m = BinaryMask::rect(4, 4, 1, 1, 2, 2);
        assert_eq!(m.count(), 4);
        assert!(m.is_subset_of(&BinaryMask::ones(4, 4)));
        assert_eq!(m.iou(&m), 1.0);
    }
}
