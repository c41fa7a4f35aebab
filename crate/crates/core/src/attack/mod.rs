//! Threat model: the attacked classifier and square patch attacks, plain and
//! adaptive.

mod classifier;
mod patch;

pub use classifier::{stack_unit, train_toy_classifier, Classifier, ClassifierArch, ClassifierReport, FEATURE_LAYERS};
pub use patch::{
    apply_patch, bpda_adaptive_attack, patch_attack, patch_side, AttackKind, AttackOutcome, PatchSpec,
};

use candle_core::Tensor;

use crate::error::Result;
use crate::image::Image;
use crate::rng::RngStream;

/// An input-purifying defense as seen by an attacker.
pub trait Defense {
    fn name(&self) -> String;

    /// The real defense.
    fn defend(&self, x: &Image, rng: &RngStream) -> Result<Image>;

    /// Differentiable approximation on `(1, C, H, W)` tensors in `[0, 1]`,
    /// used only for gradients.
    fn surrogate(&self, x: &Tensor, rng: &RngStream) -> Result<Tensor>;
}

/// Passes inputs through untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> String {
        "undefended".into()
    }

    fn defend(&self, x: &Image, _rng: &RngStream) -> Result<Image> {
        Ok(x.clone())
    }

    fn surrogate(&self, x: &Tensor, _rng: &RngStream) -> Result<Tensor> {
        Ok(x.clone())
    }
}
