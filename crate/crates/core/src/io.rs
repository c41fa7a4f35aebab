//! PNG input/output: images, masks, heatmaps, panels and bar charts.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, SoftMask};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// RGB rendering; grayscale images are replicated across channels.
pub fn image_to_rgb(img: &Image) -> RgbImage {
    let (h, w, c) = img.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| to_u8(img.get(y as usize, x as usize, if c == 1 { 0 } else { k }));
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_rgb(mask: &BinaryMask) -> RgbImage {
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let v = if mask.get(y as usize, x as usize) { 255 } else { 0 };
        Rgb([v, v, v])
    })
}

/// Blue → red ramp of a `[0, 1]` map.
pub fn heatmap_to_rgb(soft: &SoftMask) -> RgbImage {
    RgbImage::from_fn(soft.width() as u32, soft.height() as u32, |x, y| {
        let v = soft.get(y as usize, x as usize).clamp(0.0, 1.0);
        Rgb([to_u8(v), to_u8(1.0 - (2.0 * v - 1.0).abs()), to_u8(1.0 - v)])
    })
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    let f = factor.max(1);
    RgbImage::from_fn(img.width() * f, img.height() * f, |x, y| *img.get_pixel(x / f, y / f))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    save_rgb(&image_to_rgb(img), path)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    save_rgb(&mask_to_rgb(mask), path)
}

pub fn save_heatmap_png(soft: &SoftMask, path: &Path) -> Result<()> {
    save_rgb(&heatmap_to_rgb(soft), path)
}

/// Reads an 8-bit PNG as an RGB image in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let px = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, px)
}

/// Side-by-side panels of equal height separated by a 1-pixel white gutter.
pub fn hstack(panels: &[RgbImage]) -> Result<RgbImage> {
    let h = panels.first().map(|p| p.height()).ok_or_else(|| Error::Shape("no panels".into()))?;
    if panels.iter().any(|p| p.height() != h) {
        return Err(Error::Shape("panels differ in height".into()));
    }
    let w: u32 = panels.iter().map(|p| p.width()).sum::<u32>() + panels.len() as u32 - 1;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + 1;
    }
    Ok(out)
}

/// Adversarial input | mask | restored output, enlarged 4×.
pub fn triptych(adv: &Image, mask: &BinaryMask, restored: &Image) -> Result<RgbImage> {
    let f = 4;
    hstack(&[upscale(&image_to_rgb(adv), f), upscale(&mask_to_rgb(mask), f), upscale(&image_to_rgb(restored), f)])
}

const PALETTE: [[u8; 3]; 6] = [[76, 114, 176], [221, 132, 82], [85, 168, 104], [196, 78, 82], [129, 114, 179], [147, 120, 96]];

/// Vertical bars for percentages in `[0, 100]`, grouped; each group shares a
/// palette ordering so bar `i` of every group has the same colour.
pub fn bar_chart(groups: &[Vec<f64>]) -> RgbImage {
    let (bar_w, gap, group_gap, height) = (14u32, 2u32, 12u32, 200u32);
    let width = groups
        .iter()
        .map(|g| g.len() as u32 * (bar_w + gap))
        .sum::<u32>()
        + group_gap * (groups.len() as u32 + 1);
    let mut img = RgbImage::from_pixel(width.max(1), height + 10, Rgb([255, 255, 255]));
    for y in [0u32, 50, 100].map(|p| height - p * height / 100) {
        for x in 0..img.width() {
            img.put_pixel(x, y.min(height), Rgb([220, 220, 220]));
        }
    }
    let mut x = group_gap;
    for g in groups {
        for (i, &v) in g.iter().enumerate() {
            let bar_h = ((v.clamp(0.0, 100.0) / 100.0) * height as f64).round() as u32;
            let color = Rgb(PALETTE[i % PALETTE.len()]);
            for bx in x..x + bar_w {
                for by in height - bar_h..height {
                    img.put_pixel(bx, by, color);
                }
            }
            x += bar_w + gap;
        }
        x += group_gap;
    }
    for x in 0..img.width() {
        img.put_pixel(x, height, Rgb([0, 0, 0]));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, 3, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn triptych_layout() {
        let img = Image::zeros(8, 8, 3).unwrap();
        let t = triptych(&img, &BinaryMask::ones(8, 8), &img).unwrap();
        assert_eq!((t.width(), t.height()), (3 * 32 + 2, 32));
        assert_eq!(t.get_pixel(40, 5), &Rgb([255, 255, 255]));
    }
}
