//! Small conditional U-shaped ε-predictor for desk-scale experiments.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conditioning, Denoiser, InpaintInputs, TextEncoder};
use crate::config::DenoiserConfig;
use crate::data::{random_sticker, ToyDataset};
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::nn::{load_checkpoint, save_checkpoint, silu, Conv, Dense, ParamStore};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

const TIME_FEATURES: usize = 32;
pub(crate) const CLEAN_CAPTION: &str = "clean";
pub(crate) const STICKER_CAPTION: &str = "adversarial";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Arch {
    channels: usize,
    base: usize,
    emb_dim: usize,
    cond_dim: usize,
    inpaint: bool,
}

#[derive(Debug, Clone)]
struct Block {
    film: Dense,
    conv: Conv,
    ch: usize,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, ch: usize, emb: usize, rng: &RngStream) -> Result<Self> {
        Ok(Self {
            film: Dense::new(store, &format!("{name}.film"), emb, 2 * ch, 0.1, rng)?,
            conv: Conv::new(store, &format!("{name}.conv"), ch, ch, 3, rng)?,
            ch,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let (b, _) = emb.dims2()?;
        let film = self.film.forward(emb)?;
        let scale = film.narrow(1, 0, self.ch)?.reshape((b, self.ch, 1, 1))?;
        let shift = film.narrow(1, self.ch, self.ch)?.reshape((b, self.ch, 1, 1))?;
        let h = x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        Ok((x + self.conv.forward(&silu(&h)?)?.affine(0.5, 0.0)?)?)
    }
}

/// Conditional ε-predictor with optional inpainting channels
/// (`C` noisy + 1 mask + `C` masked known image).
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    arch: Arch,
    store: ParamStore,
    schedule: NoiseSchedule,
    text: TextEncoder,
    null_cond: Tensor,
    time1: Dense,
    time2: Dense,
    cond1: Dense,
    cond2: Dense,
    conv_in: Conv,
    b32: Block,
    down16: Conv,
    b16: Block,
    down8: Conv,
    b8a: Block,
    b8b: Block,
    up16: Block,
    proj32: Conv,
    up32: Block,
    conv_out: Conv,
}

impl ToyDenoiser {
    pub fn new(
        channels: usize,
        cfg: &DenoiserConfig,
        inpaint: bool,
        schedule: NoiseSchedule,
        text: TextEncoder,
        device: &Device,
    ) -> Result<Self> {
        let arch = Arch { channels, base: cfg.base_channels, emb_dim: cfg.emb_dim, cond_dim: text.dim(), inpaint };
        Self::build(arch, schedule, text, RngStream::new(cfg.seed, 0).named("denoiser-init"), device)
    }

    fn build(arch: Arch, schedule: NoiseSchedule, text: TextEncoder, rng: RngStream, device: &Device) -> Result<Self> {
        let mut s = ParamStore::new(DType::F32, device.clone());
        let (f, e, c) = (arch.base, arch.emb_dim, arch.channels);
        let cin = if arch.inpaint { 2 * c + 1 } else { c };
        let null_cond = s.normal("cond.null", &[1, arch.cond_dim], 1, 1.0, &rng)?;
        Ok(Self {
            time1: Dense::new(&mut s, "time.l1", TIME_FEATURES, e, 1.0, &rng)?,
            time2: Dense::new(&mut s, "time.l2", e, e, 1.0, &rng)?,
            cond1: Dense::new(&mut s, "cond.l1", arch.cond_dim, e, 1.0, &rng)?,
            cond2: Dense::new(&mut s, "cond.l2", e, e, 1.0, &rng)?,
            conv_in: Conv::new(&mut s, "conv_in", cin, f, 3, &rng)?,
            b32: Block::new(&mut s, "b32", f, e, &rng)?,
            down16: Conv::new(&mut s, "down16", f, 2 * f, 3, &rng)?,
            b16: Block::new(&mut s, "b16", 2 * f, e, &rng)?,
            down8: Conv::new(&mut s, "down8", 2 * f, 2 * f, 3, &rng)?,
            b8a: Block::new(&mut s, "b8a", 2 * f, e, &rng)?,
            b8b: Block::new(&mut s, "b8b", 2 * f, e, &rng)?,
            up16: Block::new(&mut s, "up16", 2 * f, e, &rng)?,
            proj32: Conv::new(&mut s, "proj32", 2 * f, f, 1, &rng)?,
            up32: Block::new(&mut s, "up32", f, e, &rng)?,
            conv_out: Conv::zeroed(&mut s, "conv_out", f, c, 3)?,
            null_cond,
            arch,
            store: s,
            schedule,
            text,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Conditioning for a caption made of vocabulary words.
    pub fn caption(&self, text: &str) -> Result<Conditioning> {
        Conditioning::from_tensor(self.text.embed(text, DType::F32, self.store.device())?)
    }

    fn time_features(&self, steps: &[usize]) -> Result<Tensor> {
        let half = TIME_FEATURES / 2;
        let mut v = Vec::with_capacity(steps.len() * TIME_FEATURES);
        for &t in steps {
            for i in 0..half {
                let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
                let a = t as f64 * freq;
                v.push(a.sin() as f32);
            }
            for i in 0..half {
                let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
                let a = t as f64 * freq;
                v.push(a.cos() as f32);
            }
        }
        Ok(Tensor::from_vec(v, (steps.len(), TIME_FEATURES), self.store.device())?)
    }

    /// Sum-pooled prompt, or the learned null embedding, as a `(1, d)` row.
    pub fn pool_conditioning(&self, cond: &Conditioning) -> Result<Tensor> {
        match cond.vectors() {
            None => Ok(self.null_cond.clone()),
            Some(v) => {
                let (_, d) = v.dims2()?;
                if d != self.arch.cond_dim {
                    return Err(Error::Shape(format!("conditioning dim {d}, model expects {}", self.arch.cond_dim)));
                }
                Ok(v.sum_keepdim(0)?)
            }
        }
    }

    /// Core network on pre-assembled input channels, per-sample steps and pooled conditioning rows.
    fn forward_raw(&self, x_in: &Tensor, steps: &[usize], cond_rows: &Tensor) -> Result<Tensor> {
        let temb = self.time2.forward(&silu(&self.time1.forward(&self.time_features(steps)?)?)?)?;
        let cemb = self.cond2.forward(&silu(&self.cond1.forward(cond_rows)?)?)?;
        let emb = silu(&temb.broadcast_add(&cemb)?)?;
        let (_, _, h, w) = x_in.dims4()?;
        let h32 = self.b32.forward(&self.conv_in.forward(x_in)?, &emb)?;
        let x16 = silu(&self.down16.forward(&h32.avg_pool2d(2)?)?)?;
        let h16 = self.b16.forward(&x16, &emb)?;
        let x8 = silu(&self.down8.forward(&h16.avg_pool2d(2)?)?)?;
        let h8 = self.b8b.forward(&self.b8a.forward(&x8, &emb)?, &emb)?;
        let u16 = self.up16.forward(&(h8.upsample_nearest2d(h / 2, w / 2)? + &h16)?, &emb)?;
        let u32 = (self.proj32.forward(&u16)?.upsample_nearest2d(h, w)? + &h32)?;
        let u32 = self.up32.forward(&u32, &emb)?;
        self.conv_out.forward(&silu(&u32)?)
    }

    fn assemble_input(&self, x_t: &Tensor, inpaint: Option<&InpaintInputs>) -> Result<Tensor> {
        if !self.arch.inpaint {
            if inpaint.is_some() {
                return Err(Error::Param("denoiser lacks inpainting input channels".into()));
            }
            return Ok(x_t.clone());
        }
        let (b, c, h, w) = x_t.dims4()?;
        let full;
        let extra = match inpaint {
            Some(e) => e,
            None => {
                full = InpaintInputs::full(b, c, h, w, x_t.dtype(), x_t.device())?;
                &full
            }
        };
        let mask = extra.mask.broadcast_as((b, 1, h, w))?;
        let known = extra.masked_known.broadcast_as((b, c, h, w))?;
        Ok(Tensor::cat(&[x_t, &mask, &known], 1)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "toy-denoiser",
            "arch": self.arch,
            "schedule": self.schedule,
            "text": self.text,
        });
        save_checkpoint(path, self.store.tensors(), &meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta) = load_checkpoint(path)?;
        if meta["kind"] != "toy-denoiser" {
            return Err(Error::Data(format!("{} is not a denoiser checkpoint", path.display())));
        }
        let arch: Arch = serde_json::from_value(meta["arch"].clone())?;
        let schedule: NoiseSchedule = serde_json::from_value(meta["schedule"].clone())?;
        let text: TextEncoder = serde_json::from_value(meta["text"].clone())?;
        let mut model = Self::build(arch, schedule, text, RngStream::new(0, 0), device)?;
        model.store.load_from(&tensors)?;
        Ok(model)
    }
}

impl Denoiser for ToyDenoiser {
    fn channels(&self) -> usize {
        self.arch.channels
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn supports_inpaint_channels(&self) -> bool {
        self.arch.inpaint
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn dtype(&self) -> DType {
        DType::F32
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &Conditioning, inpaint: Option<&InpaintInputs>) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != self.arch.channels {
            return Err(Error::Shape(format!("{c}-channel input for {}-channel denoiser", self.arch.channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("{h}x{w} input; sides must be multiples of 4")));
        }
        let x_in = self.assemble_input(x_t, inpaint)?;
        let rows = self.pool_conditioning(cond)?.broadcast_as((b, self.arch.cond_dim))?.contiguous()?;
        self.forward_raw(&x_in, &vec![t; b], &rows)
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    /// Means over consecutive windows of `window` steps.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.step_losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Trains the toy denoiser on ε-prediction.
///
/// A share of samples carries a random square sticker and the "adversarial"
/// caption; the rest are captioned "clean". Only clean captions are dropped to
/// the null embedding (with probability `cond_dropout`), so the empty prompt
/// models sticker-free images. A share of samples is posed as inpainting with
/// a random rectangular hole.
pub fn train_toy_denoiser(
    dataset: &ToyDataset,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    device: &Device,
) -> Result<(ToyDenoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let (h, w, c) = dataset.check_uniform()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Data(format!("{h}x{w} images; sides must be multiples of 4")));
    }
    let text = TextEncoder::toy(cfg.cond_dim, dataset.classes, cfg.seed);
    let model = ToyDenoiser::new(c, cfg, true, schedule.clone(), text, device)?;
    let clean_row = model.text.token_embedding(CLEAN_CAPTION)?.to_vec();
    let sticker_row = model.text.token_embedding(STICKER_CAPTION)?.to_vec();
    let d = model.arch.cond_dim;
    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
    )?;
    let root = RngStream::new(cfg.seed, 0).named("denoiser-train");
    let b = cfg.batch_size.max(1);
    let plane = h * w;
    let mut report = TrainReport::default();
    for step in 0..cfg.train_steps {
        let srng = root.substream(step as u64);
        let mut g = srng.generator();
        let mut x0 = Vec::with_capacity(b * c * plane);
        let mut masks = Vec::with_capacity(b * plane);
        let mut rows = Vec::with_capacity(b * d);
        let mut keep = Vec::with_capacity(b);
        let mut steps = Vec::with_capacity(b);
        for i in 0..b {
            let idx = g.random_range(0..dataset.len());
            let mut img = dataset.images[idx].clone();
            let sticker = g.random_bool(cfg.sticker_fraction);
            if sticker {
                img = random_sticker(&img, (0.02, 0.1), &srng.substream(1000 + i as u64)).0;
            }
            rows.extend_from_slice(if sticker { &sticker_row } else { &clean_row });
            let drop = g.random_bool(cfg.cond_dropout);
            keep.push(if drop && !sticker { 0f32 } else { 1.0 });
            let mask = if g.random_bool(cfg.inpaint_fraction) {
                let mh = g.random_range(3..=h / 2);
                let mw = g.random_range(3..=w / 2);
                let top = g.random_range(0..=h - mh);
                let left = g.random_range(0..=w - mw);
                BinaryMask::rect(h, w, top, left, mh, mw)
            } else {
                BinaryMask::ones(h, w)
            };
            masks.extend(mask.values().iter().map(|&v| v as f32));
            // HWC -> CHW, diffusion space
            for ch in 0..c {
                for p in 0..plane {
                    x0.push(img.pixels()[p * c + ch] * 2.0 - 1.0);
                }
            }
            steps.push(g.random_range(0..schedule.len()));
        }
        let x0 = Tensor::from_vec(x0, (b, c, h, w), device)?;
        let mask = Tensor::from_vec(masks, (b, 1, h, w), device)?;
        let eps = srng.named("eps").normal_tensor((b, c, h, w), device)?;
        let sa: Vec<f32> = steps.iter().map(|&t| schedule.alpha_bar(t).sqrt() as f32).collect();
        let sn: Vec<f32> = steps.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt() as f32).collect();
        let sa = Tensor::from_vec(sa, (b, 1, 1, 1), device)?;
        let sn = Tensor::from_vec(sn, (b, 1, 1, 1), device)?;
        let x_t = (x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?;
        let extra = InpaintInputs::new(&x0, &mask)?;
        let x_in = model.assemble_input(&x_t, Some(&extra))?;
        let keep = Tensor::from_vec(keep, (b, 1), device)?;
        let rows = Tensor::from_vec(rows, (b, d), device)?;
        let cond_rows = (rows.broadcast_mul(&keep)? + model.null_cond.broadcast_mul(&keep.affine(-1.0, 1.0)?)?)?;
        let pred = model.forward_raw(&x_in, &steps, &cond_rows)?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, value });
        }
        report.step_losses.push(value);
        opt.backward_step(&loss)?;
        if step % 250 == 0 {
            log::debug!("denoiser step {step}: loss {value:.4}");
        }
    }
    Ok((model, report))
}
