//! The assembled defenses: localize → refine → restore, its no-restoration
//! variant, and global purification.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attack::Defense;
use crate::config::DefenseConfig;
use crate::diffusion::{diffpure_baseline, noise_with, predict_x0_tensor, Conditioning, Denoiser, InpaintInputs};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, SoftMask};
use crate::localization::{estimate_soft_mask_traced, soft_mask_tensor};
use crate::nn::straight_through;
use crate::refine::{refine, Refined};
use crate::restoration::{restore, zero_fill};
use crate::rng::RngStream;
use crate::schedule::{ratio_to_step, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    Undefended,
    /// Localize, refine and inpaint.
    AapInpaint,
    /// Localize, refine and blank the region.
    AapZeroFill,
    DiffPure,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Undefended => "undefended",
            DefenseKind::AapInpaint => "aap-inpaint",
            DefenseKind::AapZeroFill => "aap-zero-fill",
            DefenseKind::DiffPure => "diffpure",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [DefenseKind::Undefended, DefenseKind::AapInpaint, DefenseKind::AapZeroFill, DefenseKind::DiffPure]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown defense `{s}`")))
    }

    fn localizes(self) -> bool {
        matches!(self, DefenseKind::AapInpaint | DefenseKind::AapZeroFill)
    }
}

/// Localization and restoration prompts.
#[derive(Debug, Clone)]
pub struct Prompts {
    pub localize: Conditioning,
    pub restore: Conditioning,
}

/// Everything one defended image produced.
#[derive(Debug, Clone)]
pub struct DefenseTrace {
    pub output: Image,
    pub soft: Option<SoftMask>,
    pub repetitions: Vec<SoftMask>,
    pub refined: Option<Refined>,
}

pub struct PatchDefense<'a> {
    pub kind: DefenseKind,
    pub cfg: DefenseConfig,
    pub model: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    pub prompts: Prompts,
}

impl<'a> PatchDefense<'a> {
    pub fn new(kind: DefenseKind, cfg: DefenseConfig, model: &'a dyn Denoiser, sched: &'a NoiseSchedule, prompts: Prompts) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { kind, cfg, model, sched, prompts })
    }

    pub fn run(&self, x: &Image, rng: &RngStream) -> Result<DefenseTrace> {
        match self.kind {
            DefenseKind::Undefended => Ok(DefenseTrace { output: x.clone(), soft: None, repetitions: vec![], refined: None }),
            DefenseKind::DiffPure => {
                let out = diffpure_baseline(x, self.cfg.t_star, self.model, self.sched, self.cfg.diffpure_steps, &rng.named("diffpure"))?;
                Ok(DefenseTrace { output: out, soft: None, repetitions: vec![], refined: None })
            }
            DefenseKind::AapInpaint | DefenseKind::AapZeroFill => {
                let (soft, reps) =
                    estimate_soft_mask_traced(x, &self.cfg, &self.prompts.localize, self.model, self.sched, &rng.named("localize"))?;
                let refined = refine(&soft, &self.cfg)?;
                let output = if self.kind == DefenseKind::AapInpaint {
                    restore(x, &refined.mask, &self.prompts.restore, self.model, self.sched, &self.cfg, rng)?
                } else {
                    zero_fill(x, &refined.mask)?
                };
                Ok(DefenseTrace { output, soft: Some(soft), repetitions: reps, refined: Some(refined) })
            }
        }
    }
}

impl Defense for PatchDefense<'_> {
    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn defend(&self, x: &Image, rng: &RngStream) -> Result<Image> {
        Ok(self.run(x, rng)?.output)
    }

    fn surrogate(&self, x: &Tensor, rng: &RngStream) -> Result<Tensor> {
        let cfg = DefenseConfig { m: 1, ..self.cfg.clone() };
        match self.kind {
            DefenseKind::Undefended => Ok(x.clone()),
            DefenseKind::DiffPure => diffpure_surrogate(x, &cfg, self.model, self.sched, rng),
            kind => {
                debug_assert!(kind.localizes());
                let xd = x.affine(2.0, -1.0)?;
                let soft = soft_mask_tensor(&xd, &cfg, &self.prompts.localize, self.model, self.sched, &rng.named("localize"))?;
                let mask = ste_refined_mask(&soft, &cfg)?;
                if kind == DefenseKind::AapZeroFill {
                    Ok(x.broadcast_mul(&mask.affine(-1.0, 1.0)?)?)
                } else {
                    restore_surrogate(x, &mask, &self.prompts.restore, self.model, self.sched, rng)
                }
            }
        }
    }
}

/// Refined binary mask in the forward pass, identity gradient to the soft map.
/// `soft` is `(1, 1, H, W)`.
pub fn ste_refined_mask(soft: &Tensor, cfg: &DefenseConfig) -> Result<Tensor> {
    let (b, _, h, w) = soft.dims4()?;
    if b != 1 {
        return Err(Error::Shape("straight-through refinement takes one image".into()));
    }
    let vals: Vec<f32> = soft.detach().flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
    let soft_mask = SoftMask::new(h, w, vals.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    let hard = refine(&soft_mask, cfg)?.mask.to_tensor(soft.device())?.to_dtype(soft.dtype())?;
    straight_through(soft, &hard)
}

/// One-step inpainting estimate from pure noise, composited with the input.
/// `x` is in `[0, 1]`, `mask` is `(1, 1, H, W)`; returns `[0, 1]`.
pub fn restore_surrogate(
    x: &Tensor,
    mask: &Tensor,
    prompt_r: &Conditioning,
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Tensor> {
    let xd = x.affine(2.0, -1.0)?;
    let t = sched.len() - 1;
    let noise = rng.named("restore-surrogate").normal_tensor(xd.shape(), xd.device())?.to_dtype(xd.dtype())?;
    let x_t = noise_with(&xd, &noise, sched.alpha_bar(t))?;
    let extra = InpaintInputs::new(&xd, mask)?;
    let x0 = predict_x0_tensor(&x_t, t, prompt_r, model, sched, Some(&extra))?;
    let keep = mask.affine(-1.0, 1.0)?;
    let out = (x0.broadcast_mul(mask)? + xd.broadcast_mul(&keep)?)?;
    Ok(out.affine(0.5, 0.5)?)
}

fn diffpure_surrogate(x: &Tensor, cfg: &DefenseConfig, model: &dyn Denoiser, sched: &NoiseSchedule, rng: &RngStream) -> Result<Tensor> {
    let t = ratio_to_step(cfg.t_star, sched)?;
    if t == 0 {
        return Ok(x.clone());
    }
    let xd = x.affine(2.0, -1.0)?;
    let noise = rng.named("diffpure-surrogate").normal_tensor(xd.shape(), xd.device())?.to_dtype(xd.dtype())?;
    let x_t = noise_with(&xd, &noise, sched.alpha_bar(t))?;
    Ok(predict_x0_tensor(&x_t, t, &Conditioning::empty(), model, sched, None)?.affine(0.5, 0.5)?)
}

/// Convenience: the defense's refined mask for an image (all-zero for
/// defenses without localization).
pub fn defense_mask(trace: &DefenseTrace, height: usize, width: usize) -> BinaryMask {
    trace.refined.as_ref().map(|r| r.mask.clone()).unwrap_or_else(|| BinaryMask::zeros(height, width))
}
