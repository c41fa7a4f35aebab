//! Synthetic labelled images for desk-scale experiments.
//!
//! Class `k` of `K` is a two-colour sinusoidal grating whose orientation is
//! `k·π/K` (plus jitter). Period, phase and colours vary per image, so the
//! only label evidence is orientation. In the `Full` layout the grating fills
//! the frame; in the `Object` layout it fills a disc at a random position on
//! a faint grating of random orientation, so the evidence is localized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        class_names(self.classes)
    }

    /// Checks the set is non-empty and uniformly shaped; returns `(H, W, C)`.
    pub fn check_uniform(&self) -> Result<(usize, usize, usize)> {
        let first = self.images.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let dims = first.dims();
        if let Some(i) = self.images.iter().position(|im| im.dims() != dims) {
            return Err(Error::Data(format!("image {i} is {:?}, expected {dims:?}", self.images[i].dims())));
        }
        if self.labels.len() != self.images.len() {
            return Err(Error::Data("labels and images differ in length".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(dims)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|k| format!("grating{k}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GratingLayout {
    #[default]
    Full,
    Object,
}

/// Generator parameters for the grating family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GratingSpec {
    pub size: usize,
    pub classes: usize,
    pub layout: GratingLayout,
    pub period_range: (f32, f32),
    pub min_contrast: f32,
    pub max_contrast: f32,
    pub pixel_noise: f32,
    /// Object disc radius as a fraction of the side.
    pub radius_range: (f32, f32),
    /// Contrast range of the distractor background.
    pub background_contrast: (f32, f32),
}

struct Grating {
    theta: f32,
    period: f32,
    phase: f32,
    c1: [f32; 3],
    c2: [f32; 3],
}

impl Grating {
    fn random(theta: f32, contrast: f32, period_range: (f32, f32), g: &mut impl Rng) -> Self {
        let period = g.random_range(period_range.0..period_range.1);
        let phase = g.random_range(0.0..std::f32::consts::TAU);
        let mut c1 = [0f32; 3];
        let mut c2 = [0f32; 3];
        for ch in 0..3 {
            let mid = g.random_range(0.25f32..0.75);
            let dir = if g.random_bool(0.5) { 1.0 } else { -1.0 };
            let spread = contrast * g.random_range(0.6f32..1.0);
            c1[ch] = mid - dir * spread / 2.0;
            c2[ch] = mid + dir * spread / 2.0;
        }
        Self { theta, period, phase, c1, c2 }
    }

    fn at(&self, x: usize, y: usize, ch: usize) -> f32 {
        let (s, c) = self.theta.sin_cos();
        let u = (x as f32 * c + y as f32 * s) * std::f32::consts::TAU / self.period + self.phase;
        let a = 0.5 + 0.5 * u.sin();
        self.c1[ch] + (self.c2[ch] - self.c1[ch]) * a
    }
}

impl GratingSpec {
    pub fn new(size: usize, classes: usize) -> Self {
        Self {
            size,
            classes,
            layout: GratingLayout::Full,
            period_range: (6.0, 10.0),
            min_contrast: 0.2,
            max_contrast: 0.45,
            pixel_noise: 0.02,
            radius_range: (0.2, 0.28),
            background_contrast: (0.05, 0.15),
        }
    }

    pub fn with_layout(self, layout: GratingLayout) -> Self {
        Self { layout, ..self }
    }

    /// One image of class `label`, fully determined by `rng`.
    pub fn render(&self, label: usize, rng: &RngStream) -> Image {
        let mut g = rng.generator();
        let n = self.size;
        let pi = std::f32::consts::PI;
        let jitter = pi / (4.0 * self.classes as f32);
        let theta = pi * label as f32 / self.classes as f32 + g.random_range(-jitter..jitter);
        let contrast = g.random_range(self.min_contrast..self.max_contrast);
        let fg = Grating::random(theta, contrast, self.period_range, &mut g);
        // (background, centre, radius) for the object layout
        let object = match self.layout {
            GratingLayout::Full => None,
            GratingLayout::Object => {
                let bc = g.random_range(self.background_contrast.0..self.background_contrast.1);
                let bg = Grating::random(g.random_range(0.0..pi), bc, self.period_range, &mut g);
                let r = g.random_range(self.radius_range.0..self.radius_range.1) * n as f32;
                let lo = r.ceil();
                let hi = (n as f32 - r).floor().max(lo);
                let cy = g.random_range(lo..=hi);
                let cx = g.random_range(lo..=hi);
                Some((bg, cy, cx, r))
            }
        };
        let noise = rng.named("pixel-noise").normal_vec(n * n * 3);
        let mut px = vec![0f32; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let layer = match &object {
                    Some((bg, cy, cx, r)) if (y as f32 + 0.5 - cy).hypot(x as f32 + 0.5 - cx) > *r => bg,
                    _ => &fg,
                };
                for ch in 0..3 {
                    let i = (y * n + x) * 3 + ch;
                    px[i] = (layer.at(x, y, ch) + self.pixel_noise * noise[i]).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(n, n, 3, px).expect("grating pixels are clamped")
    }

    /// `count` images with balanced, shuffled labels.
    pub fn generate(&self, count: usize, rng: &RngStream) -> ToyDataset {
        let mut g = rng.named("labels").generator();
        let mut labels: Vec<usize> = (0..count).map(|i| i % self.classes).collect();
        for i in (1..labels.len()).rev() {
            let j = g.random_range(0..=i);
            labels.swap(i, j);
        }
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.render(l, &rng.substream(i as u64)))
            .collect();
        ToyDataset { images, labels, classes: self.classes }
    }
}

/// Kinds of random sticker texture used to caption denoiser training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StickerTexture {
    Uniform,
    Binary,
    Blocky,
}

/// Pastes a random square sticker covering `area_range` of the image.
/// Returns the stickered image and the sticker footprint `(top, left, side)`.
pub fn random_sticker(img: &Image, area_range: (f64, f64), rng: &RngStream) -> (Image, (usize, usize, usize)) {
    let mut g = rng.generator();
    let (h, w, ch) = img.dims();
    let frac = g.random_range(area_range.0..=area_range.1);
    let side = (((frac * (h * w) as f64).sqrt()).round() as usize).clamp(1, h.min(w));
    let top = g.random_range(0..=h - side);
    let left = g.random_range(0..=w - side);
    let texture = match g.random_range(0..3) {
        0 => StickerTexture::Uniform,
        1 => StickerTexture::Binary,
        _ => StickerTexture::Blocky,
    };
    let mut out = img.clone();
    let block = 2;
    let cells = side.div_ceil(block);
    let cell_vals: Vec<f32> = (0..cells * cells * ch).map(|_| g.random::<f32>()).collect();
    for r in 0..side {
        for c in 0..side {
            for k in 0..ch {
                let v: f32 = match texture {
                    StickerTexture::Uniform => g.random(),
                    StickerTexture::Binary => {
                        if g.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    StickerTexture::Blocky => {
                        let v = cell_vals[((r / block) * cells + c / block) * ch + k];
                        if v > 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                out.set(top + r, left + c, k, v);
            }
        }
    }
    (out, (top, left, side))
}
