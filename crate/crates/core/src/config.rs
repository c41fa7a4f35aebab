//! Configuration, loaded from TOML with per-section defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GratingLayout;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Knobs of the localize → refine → restore pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Noise ratio used for the one-step predictions.
    pub t_star: f64,
    /// Number of prompted/unprompted difference repetitions.
    pub m: usize,
    /// Threshold applied to the max-normalized difference map.
    pub tau_bin: f64,
    /// Gaussian smoothing std, pixels.
    pub sigma_smooth: f64,
    /// Disk radius of the final dilation, pixels.
    pub dilate_radius: usize,
    /// Connected components smaller than this (pixels) are dropped.
    pub min_area: usize,
    /// Reverse steps of the inpainting sampler.
    pub inpaint_steps: usize,
    /// Reverse steps of the global purification baseline.
    pub diffpure_steps: usize,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            t_star: 0.5,
            m: 3,
            tau_bin: 0.5,
            sigma_smooth: 1.0,
            dilate_radius: 1,
            min_area: 4,
            inpaint_steps: 50,
            diffpure_steps: 50,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_star) {
            return Err(Error::Config(format!("t_star {} outside [0, 1]", self.t_star)));
        }
        if self.m < 1 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.tau_bin > 0.0 && self.tau_bin < 1.0) {
            return Err(Error::Config(format!("tau_bin {} outside (0, 1)", self.tau_bin)));
        }
        if !(self.sigma_smooth >= 0.0 && self.sigma_smooth.is_finite()) {
            return Err(Error::Config(format!("sigma_smooth {} must be >= 0", self.sigma_smooth)));
        }
        if self.inpaint_steps < 1 || self.diffpure_steps < 1 {
            return Err(Error::Config("sampler step counts must be positive".into()));
        }
        Ok(())
    }

    /// Pixel defaults scaled to an image side: σ = 1% and dilation radius = 2%
    /// of the side, never below one pixel; despeckle area 0.05% of the image.
    pub fn scaled_to(side: usize) -> Self {
        let s = side as f64;
        Self {
            sigma_smooth: (0.01 * s).max(1.0),
            dilate_radius: ((0.02 * s).round() as usize).max(1),
            min_area: ((0.0005 * s * s).round() as usize).max(4),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.01 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub classes: usize,
    pub layout: GratingLayout,
    pub train_images: usize,
    pub val_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: 32, classes: 4, layout: GratingLayout::Object, train_images: 2000, val_images: 512, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub emb_dim: usize,
    pub cond_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of training samples carrying a random sticker and the "adversarial" caption.
    pub sticker_fraction: f64,
    /// Probability a caption is replaced by the null embedding.
    pub cond_dropout: f64,
    /// Share of training samples presented as inpainting tasks.
    pub inpaint_fraction: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            emb_dim: 64,
            cond_dim: 32,
            train_steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            sticker_fraction: 0.3,
            cond_dropout: 0.2,
            inpaint_fraction: 0.5,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 16, epochs: 8, batch_size: 32, lr: 3e-3, seed: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub area_frac: f64,
    pub iters: usize,
    /// Signed-gradient step on the patch content.
    pub step_size: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { area_frac: 0.05, iters: 100, step_size: 2.0 / 255.0, seed: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    /// Context vectors per prompt.
    pub n_ctx: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub shots: usize,
    pub w_ce: f64,
    pub w_l1: f64,
    pub w_perceptual: f64,
    pub prompt_l: String,
    pub prompt_r: String,
    /// "manual" or "random".
    pub init: String,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            n_ctx: 16,
            steps: 200,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            shots: 8,
            w_ce: 1.0,
            w_l1: 1.0,
            w_perceptual: 1.0,
            prompt_l: "adversarial".into(),
            prompt_r: "clean".into(),
            init: "manual".into(),
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_images: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_images: 128, seed: 6 }
    }
}

/// Whole-toolkit configuration; every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub defense: DefenseConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub denoiser: DenoiserConfig,
    pub classifier: ClassifierConfig,
    pub attack: AttackConfig,
    pub tuning: TuningConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.defense.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Settings validated on the bundled toy backend: pixel knobs scaled to
    /// the image side with a 2 px dilation floor, and a lower noise ratio,
    /// since the toy schedule reaches a given ᾱ earlier than large pretrained ones.
    pub fn toy() -> Self {
        let data = DataConfig::default();
        let scaled = DefenseConfig::scaled_to(data.image_size);
        let defense = DefenseConfig { t_star: 0.3, dilate_radius: scaled.dilate_radius.max(2), ..scaled };
        Self { defense, data, ..Self::default() }
    }

    /// Overrides every section seed from a single base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.defense.seed = seed;
        self.eval.seed = seed.wrapping_add(6);
        self.attack.seed = seed.wrapping_add(4);
        self.tuning.seed = seed.wrapping_add(5);
        self
    }

    /// Short SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex-encoded 16-character prefix of the SHA-256 of `value`'s JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}
