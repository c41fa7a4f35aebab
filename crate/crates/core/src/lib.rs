//! Localize-then-restore defense against adversarial patches, built on
//! the gap between prompted and unprompted diffusion denoising.

pub mod attack;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod localization;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod refine;
pub mod restoration;
pub mod rng;
pub mod schedule;

pub use config::Config;
pub use error::{Error, Result};
pub use image::{BinaryMask, Image, SoftMask};
pub use rng::RngStream;
pub use schedule::NoiseSchedule;
