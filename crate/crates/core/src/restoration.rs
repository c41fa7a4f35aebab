//! Filling the localized region: prompted inpainting, or blanking it.

use crate::config::DefenseConfig;
use crate::diffusion::{inpaint, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// Regenerates the masked region under `prompt_r`; pixels outside the mask are
/// returned bit-for-bit.
pub fn restore(
    x_adv: &Image,
    mask: &BinaryMask,
    prompt_r: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &DefenseConfig,
    rng: &RngStream,
) -> Result<Image> {
    inpaint(x_adv, mask, prompt_r, model, sched, cfg.inpaint_steps, &rng.named("restore"))
}

/// Sets masked pixels to 0.
pub fn zero_fill(x_adv: &Image, mask: &BinaryMask) -> Result<Image> {
    if !x_adv.same_spatial(mask.height(), mask.width()) {
        return Err(Error::Shape("mask and image differ in size".into()));
    }
    let c = x_adv.channels();
    let px = x_adv
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.values()[i / c] == 1 { 0.0 } else { v })
        .collect();
    Image::new(x_adv.height(), x_adv.width(), c, px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::testing::LinearDenoiser;
    use candle_core::Device;

    #[test]
    fn zero_fill_cases() {
        let img = Image::filled(4, 4, 3, 0.5).unwrap();
        assert_eq!(zero_fill(&img, &BinaryMask::zeros(4, 4)).unwrap(), img);
        assert!(zero_fill(&img, &BinaryMask::ones(4, 4)).unwrap().pixels().iter().all(|&v| v == 0.0));
        let half = BinaryMask::rect(4, 4, 0, 0, 2, 4);
        let out = zero_fill(&img, &half).unwrap();
        assert_eq!(out.get(1, 3, 2), 0.0);
        assert_eq!(out.get(2, 0, 0), 0.5);
        assert_eq!(zero_fill(&out, &half).unwrap(), out);
        assert!(matches!(zero_fill(&img, &BinaryMask::zeros(3, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn restore_is_seeded_and_respects_zero_mask() {
        let model = LinearDenoiser { scale: 0.5, cond_offset: 0.0, device: Device::Cpu };
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let img = Image::new(8, 8, 3, RngStream::new(3, 0).uniform_vec(192)).unwrap();
        let cfg = DefenseConfig { inpaint_steps: 10, ..DefenseConfig::default() };
        let c = Conditioning::empty();
        let rng = RngStream::new(1, 1);
        assert_eq!(restore(&img, &BinaryMask::zeros(8, 8), &c, &model, &sched, &cfg, &rng).unwrap(), img);
        let m = BinaryMask::rect(8, 8, 2, 2, 3, 3);
        let a = restore(&img, &m, &c, &model, &sched, &cfg, &rng).unwrap();
        let b = restore(&img, &m, &c, &model, &sched, &cfg, &rng).unwrap();
        assert_eq!(a, b);
    }
}
