//! Patch localization from the gap between prompted and unprompted
//! one-step denoising.

use candle_core::{DType, Tensor};

use crate::config::DefenseConfig;
use crate::diffusion::{noise_with, predict_x0_tensor, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, SoftMask};
use crate::rng::RngStream;
use crate::schedule::{ratio_to_step, NoiseSchedule};

/// Predictions of one noised instance under the localization prompt (`x_a`)
/// and the empty prompt (`x_b`).
#[derive(Debug, Clone)]
pub struct DifferencePair {
    pub x_a: Image,
    pub x_b: Image,
    /// Repetition index selecting the noise substream.
    pub noise_id: u64,
}

impl DifferencePair {
    /// Channel-mean absolute difference per pixel.
    pub fn difference(&self) -> Result<SoftMask> {
        self.x_a.check_same(&self.x_b)?;
        let (h, w, c) = self.x_a.dims();
        let vals = self
            .x_a
            .pixels()
            .chunks(c)
            .zip(self.x_b.pixels().chunks(c))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f32>() / c as f32)
            .collect();
        SoftMask::new(h, w, vals)
    }
}

/// Noise drawn for repetition `i`, shaped like `x`.
fn repetition_noise(x: &Tensor, rng: &RngStream, i: u64) -> Result<Tensor> {
    rng.substream(i).normal_tensor(x.shape(), x.device())?.to_dtype(x.dtype()).map_err(Into::into)
}

/// Both branch predictions (diffusion space) on one shared noised instance.
pub fn branch_predictions(
    x: &Tensor,
    t: usize,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    eps: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let x_t = noise_with(x, eps, sched.alpha_bar(t))?;
    let x_a = predict_x0_tensor(&x_t, t, prompt_l, model, sched, None)?;
    let x_b = predict_x0_tensor(&x_t, t, &Conditioning::empty(), model, sched, None)?;
    Ok((x_a, x_b))
}

/// Differentiable difference map: `x` is `(B, C, H, W)` in diffusion space and
/// the result `(B, 1, H, W)` in pixel units.
pub fn difference_map_tensor(
    x: &Tensor,
    t: usize,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    eps: &Tensor,
) -> Result<Tensor> {
    let (x_a, x_b) = branch_predictions(x, t, prompt_l, model, sched, eps)?;
    // diffusion space spans 2 pixel units
    Ok((x_a - x_b)?.abs()?.mean_keepdim(1)?.affine(0.5, 0.0)?)
}

/// Mean of `m` difference maps rescaled by its maximum, kept on the autodiff graph.
/// The maximum itself is treated as a constant.
pub fn soft_mask_tensor(
    x: &Tensor,
    cfg: &DefenseConfig,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Tensor> {
    if cfg.m < 1 {
        return Err(Error::Param("m must be at least 1".into()));
    }
    let t = ratio_to_step(cfg.t_star, sched)?;
    let mut acc: Option<Tensor> = None;
    for i in 0..cfg.m as u64 {
        let d = difference_map_tensor(x, t, prompt_l, model, sched, &repetition_noise(x, rng, i)?)?;
        acc = Some(match acc {
            None => d,
            Some(a) => (a + d)?,
        });
    }
    let mean = acc.expect("m >= 1").affine(1.0 / cfg.m as f64, 0.0)?;
    let b = mean.dims()[0];
    let max = mean.flatten_from(1)?.max_keepdim(1)?.detach();
    let max = max.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let inv: Vec<f32> = max.iter().map(|r| if r[0] > 0.0 { (1.0 / r[0]) as f32 } else { 0.0 }).collect();
    let inv = Tensor::from_vec(inv, (b, 1, 1, 1), x.device())?.to_dtype(mean.dtype())?;
    Ok(mean.broadcast_mul(&inv)?)
}

/// One repetition's prediction pair.
pub fn difference_pair(
    x_adv: &Image,
    cfg: &DefenseConfig,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &RngStream,
    i: u64,
) -> Result<DifferencePair> {
    let t = ratio_to_step(cfg.t_star, sched)?;
    let x = x_adv.to_diffusion_tensor(model.device())?.to_dtype(model.dtype())?;
    let (x_a, x_b) = branch_predictions(&x, t, prompt_l, model, sched, &repetition_noise(&x, rng, i)?)?;
    Ok(DifferencePair { x_a: Image::from_diffusion_tensor(&x_a)?, x_b: Image::from_diffusion_tensor(&x_b)?, noise_id: i })
}

/// Difference map of repetition `i`.
pub fn aap_difference(
    x_adv: &Image,
    cfg: &DefenseConfig,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &RngStream,
    i: u64,
) -> Result<SoftMask> {
    difference_pair(x_adv, cfg, prompt_l, model, sched, rng, i)?.difference()
}

/// Averages `cfg.m` repetitions and rescales to `[0, 1]`, also returning each
/// repetition's map.
pub fn estimate_soft_mask_traced(
    x_adv: &Image,
    cfg: &DefenseConfig,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<(SoftMask, Vec<SoftMask>)> {
    if cfg.m < 1 {
        return Err(Error::Param("m must be at least 1".into()));
    }
    let maps = (0..cfg.m as u64)
        .map(|i| aap_difference(x_adv, cfg, prompt_l, model, sched, rng, i))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (x_adv.height(), x_adv.width());
    let mut mean = vec![0f32; h * w];
    for map in &maps {
        for (acc, v) in mean.iter_mut().zip(map.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= cfg.m as f32);
    Ok((rescale_by_max(SoftMask::new(h, w, mean)?), maps))
}

pub fn estimate_soft_mask(
    x_adv: &Image,
    cfg: &DefenseConfig,
    prompt_l: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<SoftMask> {
    Ok(estimate_soft_mask_traced(x_adv, cfg, prompt_l, model, sched, rng)?.0)
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn rescale_by_max(soft: SoftMask) -> SoftMask {
    let max = soft.max();
    if max <= 0.0 {
        return soft;
    }
    let vals = soft.values().iter().map(|v| (v / max).min(1.0)).collect();
    SoftMask::new(soft.height(), soft.width(), vals).expect("rescaled values stay in [0, 1]")
}

/// 1 where `soft >= tau`.
pub fn binarize(soft: &SoftMask, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Param(format!("threshold {tau} outside (0, 1)")));
    }
    let vals = soft.values().iter().map(|&v| u8::from(v as f64 >= tau)).collect();
    BinaryMask::new(soft.height(), soft.width(), vals)
}
