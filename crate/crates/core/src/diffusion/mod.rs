//! Denoiser interface, forward noising, one-step prediction and the
//! reverse samplers built on them.

mod text;
mod toy;

pub use text::TextEncoder;
pub use toy::{train_toy_denoiser, ToyDenoiser, TrainReport};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::rng::RngStream;
use crate::schedule::{ratio_to_step, NoiseSchedule};

/// Smallest cumulative signal retention one-step inversion accepts.
pub const MIN_ALPHA_BAR: f64 = 1e-6;

/// Text-side guidance: `n × d_cond` vectors, or the empty prompt.
#[derive(Debug, Clone)]
pub struct Conditioning {
    vectors: Option<Tensor>,
}

impl Conditioning {
    /// The unconditional branch (empty text).
    pub fn empty() -> Self {
        Self { vectors: None }
    }

    /// Wraps an `n × d` matrix. Gradients flow through it when it is a `Var`.
    pub fn from_tensor(vectors: Tensor) -> Result<Self> {
        let (n, _) = vectors.dims2()?;
        if n == 0 {
            return Err(Error::Shape("conditioning needs at least one vector".into()));
        }
        let finite = vectors
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Range("non-finite conditioning entry".into()));
        }
        Ok(Self { vectors: Some(vectors) })
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_none()
    }

    pub fn vectors(&self) -> Option<&Tensor> {
        self.vectors.as_ref()
    }
}

/// Extra channels of the inpainting variant: the region to generate and the
/// known image with that region blanked, both in diffusion space.
#[derive(Debug, Clone)]
pub struct InpaintInputs {
    /// `(B, 1, H, W)`, 1 = generate.
    pub mask: Tensor,
    /// `(B, C, H, W)`, zero inside the mask.
    pub masked_known: Tensor,
}

impl InpaintInputs {
    pub fn new(known: &Tensor, mask: &Tensor) -> Result<Self> {
        let keep = mask.affine(-1.0, 1.0)?;
        Ok(Self { masked_known: known.broadcast_mul(&keep)?, mask: mask.clone() })
    }

    /// Everything-to-generate inputs used for plain (non-inpainting) prediction.
    pub fn full(batch: usize, channels: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            mask: Tensor::ones((batch, 1, h, w), dtype, device)?,
            masked_known: Tensor::zeros((batch, channels, h, w), dtype, device)?,
        })
    }
}

/// An ε-predicting denoiser.
pub trait Denoiser {
    fn channels(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn supports_inpaint_channels(&self) -> bool;
    fn device(&self) -> &Device;
    fn dtype(&self) -> DType;

    /// Predicts the noise in `x_t` (`(B, C, H, W)`, diffusion space) at step `t`.
    /// `inpaint` is `None` for plain prediction.
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &Conditioning, inpaint: Option<&InpaintInputs>) -> Result<Tensor>;
}

/// A noised image in diffusion space. It is not clamped, so it is kept
/// as a tensor rather than an [`Image`].
#[derive(Debug, Clone)]
pub struct NoisyImage {
    pub tensor: Tensor,
    pub step: usize,
}

/// `sqrt(ᾱ)·x0 + sqrt(1−ᾱ)·ε` on diffusion-space tensors.
pub fn noise_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    Ok((x0.affine(alpha_bar.sqrt(), 0.0)? + eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?)?)
}

/// Forward-noises `x0` to step `t` with fresh noise drawn from `rng`.
pub fn forward_noise(x0: &Image, t: usize, sched: &NoiseSchedule, rng: &RngStream, device: &Device) -> Result<NoisyImage> {
    Ok(forward_noise_traced(x0, t, sched, rng, device)?.0)
}

/// As [`forward_noise`], also returning the injected noise.
pub fn forward_noise_traced(
    x0: &Image,
    t: usize,
    sched: &NoiseSchedule,
    rng: &RngStream,
    device: &Device,
) -> Result<(NoisyImage, Tensor)> {
    sched.check_step(t)?;
    let x = x0.to_diffusion_tensor(device)?;
    let eps = rng.normal_tensor(x.shape(), device)?;
    let xt = noise_with(&x, &eps, sched.alpha_bar(t))?;
    Ok((NoisyImage { tensor: xt, step: t }, eps))
}

/// Inverts the forward process with a single denoiser evaluation;
/// the result stays in diffusion space and is clamped to `[-1, 1]`.
pub fn predict_x0_tensor(
    x_t: &Tensor,
    t: usize,
    cond: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    inpaint: Option<&InpaintInputs>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    if ab < MIN_ALPHA_BAR {
        return Err(Error::Numerical(format!("alpha_bar[{t}] = {ab:e} below floor")));
    }
    let eps = model.predict_noise(x_t, t, cond, inpaint)?;
    let x0 = (x_t - eps.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?;
    Ok(x0.clamp(-1.0, 1.0)?)
}

/// One-step clean-image estimate from a noisy image.
pub fn predict_x0_one_step(
    x_t: &NoisyImage,
    cond: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<Image> {
    let x0 = predict_x0_tensor(&x_t.tensor, x_t.step, cond, model, sched, None)?;
    Image::from_diffusion_tensor(&x0)
}

/// `count` decreasing step indices from `start` down to 0, evenly spaced.
pub fn reverse_timesteps(start: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, start + 1);
    if count == 1 {
        return vec![start];
    }
    let mut steps: Vec<usize> = (0..count)
        .map(|i| ((start as f64) * i as f64 / (count - 1) as f64).round() as usize)
        .collect();
    steps.dedup();
    steps.reverse();
    steps
}

/// Ancestral update from `x_t` to the earlier step `t_prev` given a clean estimate.
fn ancestral_step(x_t: &Tensor, x0: &Tensor, t: usize, t_prev: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(t_prev);
    let ratio = ab_t / ab_p;
    let beta = 1.0 - ratio;
    let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
    let ct = ratio.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
    let var = (beta * (1.0 - ab_p) / (1.0 - ab_t)).max(0.0);
    let mean = (x0.affine(c0, 0.0)? + x_t.affine(ct, 0.0)?)?;
    Ok((mean + noise.affine(var.sqrt(), 0.0)?)?)
}

/// Runs the reverse chain over `timesteps` (decreasing, ending at any step),
/// returning the final clean estimate in diffusion space.
fn reverse_chain(
    mut x: Tensor,
    timesteps: &[usize],
    cond: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    inpaint: Option<&InpaintInputs>,
    rng: &RngStream,
) -> Result<Tensor> {
    for (i, &t) in timesteps.iter().enumerate() {
        let x0 = predict_x0_tensor(&x, t, cond, model, sched, inpaint)?;
        match timesteps.get(i + 1) {
            Some(&t_prev) => {
                let noise = rng.substream(i as u64).normal_tensor(x.shape(), x.device())?;
                x = ancestral_step(&x, &x0.to_dtype(x.dtype())?, t, t_prev, sched, &noise.to_dtype(x.dtype())?)?;
            }
            None => return Ok(x0),
        }
    }
    Ok(x)
}

/// Pixels where `mask` is 1 come from `generated`; every other pixel is copied
/// bit-for-bit from `known`.
pub fn composite(generated: &Image, known: &Image, mask: &BinaryMask) -> Result<Image> {
    generated.check_same(known)?;
    if !known.same_spatial(mask.height(), mask.width()) {
        return Err(Error::Shape("mask and image differ in size".into()));
    }
    let c = known.channels();
    let px = known
        .pixels()
        .iter()
        .zip(generated.pixels())
        .enumerate()
        .map(|(i, (&k, &g))| if mask.values()[i / c] == 1 { g } else { k })
        .collect();
    Image::new(known.height(), known.width(), c, px)
}

/// Mask-conditioned reverse sampling: the region where `mask` is 1 is generated
/// under `cond`, everything else is copied from `x_known`.
pub fn inpaint(
    x_known: &Image,
    mask: &BinaryMask,
    cond: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &RngStream,
) -> Result<Image> {
    if steps < 1 {
        return Err(Error::Param("inpainting needs at least one step".into()));
    }
    if !model.supports_inpaint_channels() {
        return Err(Error::Param("denoiser lacks inpainting input channels".into()));
    }
    let (h, w, c) = x_known.dims();
    if !x_known.same_spatial(mask.height(), mask.width()) {
        return Err(Error::Shape(format!("{}x{} mask for {h}x{w} image", mask.height(), mask.width())));
    }
    if mask.is_all_zero() {
        return Ok(x_known.clone());
    }
    let dev = model.device();
    let dtype = model.dtype();
    let known = x_known.to_diffusion_tensor(dev)?.to_dtype(dtype)?;
    let m = mask.to_tensor(dev)?.to_dtype(dtype)?;
    let extra = InpaintInputs::new(&known, &m)?;
    let start = sched.len() - 1;
    let x = rng.named("init").normal_tensor((1, c, h, w), dev)?.to_dtype(dtype)?;
    let timesteps = reverse_timesteps(start, steps);
    let out = reverse_chain(x, &timesteps, cond, model, sched, Some(&extra), &rng.named("chain"))?;
    composite(&Image::from_diffusion_tensor(&out)?, x_known, mask)
}

/// Global purification: noise to the ratio's step, then run an unconditional
/// reverse chain of at most `steps` evaluations back to step 0.
pub fn diffpure_baseline(
    x_adv: &Image,
    t_star: f64,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &RngStream,
) -> Result<Image> {
    let t = ratio_to_step(t_star, sched)?;
    if t_star == 0.0 {
        return Ok(x_adv.clone());
    }
    let dev = model.device();
    let (h, w, c) = x_adv.dims();
    let noisy = forward_noise(x_adv, t, sched, &rng.named("forward"), dev)?;
    let extra = if model.supports_inpaint_channels() {
        Some(InpaintInputs::full(1, c, h, w, model.dtype(), dev)?)
    } else {
        None
    };
    let timesteps = reverse_timesteps(t, steps.max(1));
    let out = reverse_chain(
        noisy.tensor.to_dtype(model.dtype())?,
        &timesteps,
        &Conditioning::empty(),
        model,
        sched,
        extra.as_ref(),
        &rng.named("chain"),
    )?;
    Image::from_diffusion_tensor(&out)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Returns a stored noise tensor regardless of input.
    pub struct OracleDenoiser {
        pub eps: Tensor,
        pub inpaint: bool,
    }

    impl Denoiser for OracleDenoiser {
        fn channels(&self) -> usize {
            self.eps.dims()[1]
        }
        fn cond_dim(&self) -> usize {
            4
        }
        fn supports_inpaint_channels(&self) -> bool {
            self.inpaint
        }
        fn device(&self) -> &Device {
            self.eps.device()
        }
        fn dtype(&self) -> DType {
            self.eps.dtype()
        }
        fn predict_noise(&self, _x: &Tensor, _t: usize, _c: &Conditioning, _i: Option<&InpaintInputs>) -> Result<Tensor> {
            Ok(self.eps.clone())
        }
    }

    /// Predicts `scale · x_t`, plus `offset` on channel 0 when conditioned.
    pub struct LinearDenoiser {
        pub scale: f64,
        pub cond_offset: f64,
        pub device: Device,
    }

    impl Denoiser for LinearDenoiser {
        fn channels(&self) -> usize {
            3
        }
        fn cond_dim(&self) -> usize {
            4
        }
        fn supports_inpaint_channels(&self) -> bool {
            true
        }
        fn device(&self) -> &Device {
            &self.device
        }
        fn dtype(&self) -> DType {
            DType::F32
        }
        fn predict_noise(&self, x: &Tensor, _t: usize, c: &Conditioning, _i: Option<&InpaintInputs>) -> Result<Tensor> {
            let base = x.affine(self.scale, 0.0)?;
            if c.is_empty() || self.cond_offset == 0.0 {
                return Ok(base);
            }
            let (b, ch, h, w) = x.dims4()?;
            let mut off = vec![0f32; b * ch * h * w];
            for bi in 0..b {
                for i in 0..h * w {
                    off[bi * ch * h * w + i] = self.cond_offset as f32;
                }
            }
            Ok((base + Tensor::from_vec(off, (b, ch, h, w), x.device())?)?)
        }
    }
}
