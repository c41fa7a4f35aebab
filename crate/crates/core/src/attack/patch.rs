use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Defense, NoDefense};
use crate::config::AttackConfig;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::nn::cross_entropy;
use crate::rng::RngStream;

/// Optimized square patch families. Both place the patch at a random fixed
/// position and optimize its content; they differ in initialization and loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Uniform-noise start, cross-entropy ascent.
    AdvP,
    /// Mid-gray start, logit-margin ascent.
    LaVAN,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::AdvP => "advp",
            AttackKind::LaVAN => "lavan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "advp" => Ok(AttackKind::AdvP),
            "lavan" => Ok(AttackKind::LaVAN),
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }
}

/// A square patch: position, side and `side × side × C` content in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub channels: usize,
    pub content: Vec<f32>,
}

impl PatchSpec {
    pub fn new(top: usize, left: usize, side: usize, channels: usize, content: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return Err(Error::Bounds("patch side must be positive".into()));
        }
        if content.len() != side * side * channels {
            return Err(Error::Shape(format!("{} content values for a {side}x{side}x{channels} patch", content.len())));
        }
        if content.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range("patch content outside [0, 1]".into()));
        }
        Ok(Self { top, left, side, channels, content })
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.top + self.side > height || self.left + self.side > width {
            return Err(Error::Bounds(format!(
                "{}px patch at ({}, {}) leaves a {height}x{width} image",
                self.side, self.top, self.left
            )));
        }
        Ok(())
    }

    pub fn area_frac(&self, height: usize, width: usize) -> f64 {
        (self.side * self.side) as f64 / (height * width) as f64
    }

    /// Ground-truth footprint.
    pub fn mask(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::rect(height, width, self.top, self.left, self.side, self.side)
    }
}

/// Side of the square covering `area_frac` of the image, at least 1 pixel.
pub fn patch_side(height: usize, width: usize, area_frac: f64) -> usize {
    ((area_frac * (height * width) as f64).sqrt().round() as usize).clamp(1, height.min(width))
}

/// Pastes the patch; every pixel outside its square is copied unchanged.
pub fn apply_patch(x: &Image, spec: &PatchSpec) -> Result<Image> {
    spec.check_bounds(x.height(), x.width())?;
    if spec.channels != x.channels() {
        return Err(Error::Shape(format!("{}-channel patch on {}-channel image", spec.channels, x.channels())));
    }
    let mut out = x.clone();
    let c = spec.channels;
    for r in 0..spec.side {
        for col in 0..spec.side {
            for k in 0..c {
                out.set(spec.top + r, spec.left + col, k, spec.content[(r * spec.side + col) * c + k]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Best patch found.
    pub spec: PatchSpec,
    /// Input with the best patch applied (before any defense).
    pub image: Image,
    pub best_loss: f64,
    /// Best-so-far attack objective after each evaluation.
    pub loss_trace: Vec<f64>,
}

/// Non-adaptive patch attack against the bare classifier.
pub fn patch_attack(
    x: &Image,
    y: usize,
    clf: &Classifier,
    kind: AttackKind,
    cfg: &AttackConfig,
    rng: &RngStream,
) -> Result<AttackOutcome> {
    optimize_patch(x, y, clf, kind, &NoDefense, cfg, rng)
}

/// Adaptive attack: the forward pass runs the full defense, gradients come
/// from the defense's differentiable surrogate.
pub fn bpda_adaptive_attack(
    x: &Image,
    y: usize,
    clf: &Classifier,
    kind: AttackKind,
    defense: &dyn Defense,
    cfg: &AttackConfig,
    rng: &RngStream,
) -> Result<AttackOutcome> {
    optimize_patch(x, y, clf, kind, defense, cfg, rng)
}

fn objective(kind: AttackKind, logits: &Tensor, y: usize) -> Result<Tensor> {
    match kind {
        AttackKind::AdvP => cross_entropy(logits, &[y]),
        AttackKind::LaVAN => {
            let k = logits.dims2()?.1;
            let onehot: Vec<f32> = (0..k).map(|j| if j == y { 1.0 } else { 0.0 }).collect();
            let onehot = Tensor::from_vec(onehot, (1, k), logits.device())?.to_dtype(logits.dtype())?;
            let true_logit = logits.broadcast_mul(&onehot)?.sum_all()?;
            let others = (logits - onehot.affine(1e4, 0.0)?)?.max_all()?;
            Ok((others - true_logit)?)
        }
    }
}

fn optimize_patch(
    x: &Image,
    y: usize,
    clf: &Classifier,
    kind: AttackKind,
    defense: &dyn Defense,
    cfg: &AttackConfig,
    rng: &RngStream,
) -> Result<AttackOutcome> {
    let (h, w, c) = x.dims();
    let side = patch_side(h, w, cfg.area_frac);
    let mut g = rng.named("position").generator();
    let top = g.random_range(0..=h - side);
    let left = g.random_range(0..=w - side);
    let n = side * side * c;
    let mut content = match kind {
        AttackKind::AdvP => rng.named("init").uniform_vec(n),
        AttackKind::LaVAN => vec![0.5; n],
    };
    let dev = clf.device();
    let dtype = clf.dtype();
    let base = x.to_unit_tensor(dev)?.to_dtype(dtype)?;
    let footprint = BinaryMask::rect(h, w, top, left, side, side).to_tensor(dev)?.to_dtype(dtype)?;
    let outside = footprint.affine(-1.0, 1.0)?;
    let background = base.broadcast_mul(&outside)?;

    let mut best = (f64::NEG_INFINITY, content.clone());
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let spec = PatchSpec::new(top, left, side, c, content.clone())?;
        let patched_img = apply_patch(x, &spec)?;
        let drng = rng.named("defense").substream(it as u64);
        let last = it == cfg.iters;
        let value = if last {
            // final iterate: value only
            let d = defense.defend(&patched_img, &drng)?;
            let logits = clf.logits(&d.to_unit_tensor(dev)?.to_dtype(dtype)?)?;
            objective(kind, &logits, y)?.to_dtype(DType::F64)?.to_scalar::<f64>()?
        } else {
            let var = Var::from_tensor(&spec_tensor(&spec, dev, dtype)?)?;
            let padded = var
                .as_tensor()
                .pad_with_zeros(2, top, h - top - side)?
                .pad_with_zeros(3, left, w - left - side)?;
            let patched = background.broadcast_add(&padded)?;
            let sur = defense.surrogate(&patched, &drng)?;
            let real = defense.defend(&patched_img, &drng)?.to_unit_tensor(dev)?.to_dtype(dtype)?;
            let defended = (&sur + (real - &sur)?.detach())?;
            let loss = objective(kind, &clf.logits(&defended)?, y)?;
            let grads = loss.backward()?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if let Some(gr) = grads.get(var.as_tensor()) {
                // (1, C, s, s) -> HWC order of `content`
                let gr = gr.squeeze(0)?.permute((1, 2, 0))?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                let step = cfg.step_size as f32;
                for (v, gv) in content.iter_mut().zip(gr) {
                    *v = (*v + step * gv.signum() * f32::from(gv != 0.0)).clamp(0.0, 1.0);
                }
            }
            value
        };
        if value > best.0 {
            best = (value, spec.content.clone());
        }
        trace.push(best.0);
    }
    let spec = PatchSpec::new(top, left, side, c, best.1)?;
    let image = apply_patch(x, &spec)?;
    Ok(AttackOutcome { spec, image, best_loss: best.0, loss_trace: trace })
}

fn spec_tensor(spec: &PatchSpec, dev: &candle_core::Device, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(spec.content.clone(), (spec.side, spec.side, spec.channels), dev)?
        .permute((2, 0, 1))?
        .unsqueeze(0)?
        .contiguous()?
        .to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::ClassifierArch;
    use candle_core::Device;
    use proptest::prelude::*;

    fn tiny_clf() -> Classifier {
        Classifier::new(ClassifierArch { channels: 3, width: 4, classes: 3 }, 1, DType::F32, &Device::Cpu).unwrap()
    }

    fn img(seed: u64) -> Image {
        Image::new(16, 16, 3, RngStream::new(seed, 0).uniform_vec(768)).unwrap()
    }

    #[test]
    fn zero_side_and_out_of_bounds_rejected() {
        assert!(matches!(PatchSpec::new(0, 0, 0, 3, vec![]), Err(Error::Bounds(_))));
        let spec = PatchSpec::new(14, 0, 4, 3, vec![0.5; 48]).unwrap();
        assert!(matches!(apply_patch(&img(0), &spec), Err(Error::Bounds(_))));
    }

    #[test]
    fn patch_of_underlying_pixels_is_identity() {
        let x = img(1);
        let mut content = Vec::new();
        for r in 3..7 {
            for c in 2..6 {
                for k in 0..3 {
                    content.push(x.get(r, c, k));
                }
            }
        }
        let spec = PatchSpec::new(3, 2, 4, 3, content).unwrap();
        assert_eq!(apply_patch(&x, &spec).unwrap(), x);
    }

    #[test]
    fn attack_is_seeded_and_monotone() {
        let clf = tiny_clf();
        let cfg = AttackConfig { iters: 5, area_frac: 0.1, ..AttackConfig::default() };
        let a = patch_attack(&img(2), 0, &clf, AttackKind::AdvP, &cfg, &RngStream::new(3, 0)).unwrap();
        let b = patch_attack(&img(2), 0, &clf, AttackKind::AdvP, &cfg, &RngStream::new(3, 0)).unwrap();
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.image, b.image);
        assert!(a.loss_trace.windows(2).all(|w| w[1] >= w[0]));
        let l = patch_attack(&img(2), 0, &clf, AttackKind::LaVAN, &cfg, &RngStream::new(3, 0)).unwrap();
        assert!(l.loss_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_iterations_give_classifier_independent_patch() {
        let cfg = AttackConfig { iters: 0, ..AttackConfig::default() };
        let other = Classifier::new(ClassifierArch { channels: 3, width: 4, classes: 3 }, 9, DType::F32, &Device::Cpu).unwrap();
        let a = patch_attack(&img(4), 1, &tiny_clf(), AttackKind::AdvP, &cfg, &RngStream::new(5, 0)).unwrap();
        let b = patch_attack(&img(4), 1, &other, AttackKind::AdvP, &cfg, &RngStream::new(5, 0)).unwrap();
        assert_eq!(a.spec, b.spec);
    }

    #[test]
    fn identity_defense_matches_plain_attack() {
        let clf = tiny_clf();
        let cfg = AttackConfig { iters: 4, area_frac: 0.1, ..AttackConfig::default() };
        let rng = RngStream::new(8, 0);
        let a = patch_attack(&img(6), 2, &clf, AttackKind::AdvP, &cfg, &rng).unwrap();
        let b = bpda_adaptive_attack(&img(6), 2, &clf, AttackKind::AdvP, &NoDefense, &cfg, &rng).unwrap();
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    proptest! {
        #[test]
        fn only_the_square_changes(top in 0usize..12, left in 0usize..12, side in 1usize..5, seed in 0u64..1000) {
            let x = img(seed);
            let content = RngStream::new(seed, 1).uniform_vec(side * side * 3);
            let spec = PatchSpec::new(top, left, side, 3, content).unwrap();
            let out = apply_patch(&x, &spec).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    let inside = r >= top && r < top + side && c >= left && c < left + side;
                    for k in 0..3 {
                        if inside {
                            prop_assert_eq!(out.get(r, c, k), spec.content[((r - top) * side + c - left) * 3 + k]);
                        } else {
                            prop_assert_eq!(out.get(r, c, k).to_bits(), x.get(r, c, k).to_bits());
                        }
                    }
                }
            }
        }
    }
}
