//! Small convolutional classifier used as the attacked downstream model.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ClassifierConfig;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{cross_entropy, load_checkpoint, save_checkpoint, Conv, Dense, ParamStore};
use crate::rng::RngStream;

/// Feature layers exposed for the perceptual distance, in network order.
pub const FEATURE_LAYERS: [&str; 3] = ["block1", "block2", "block3"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub channels: usize,
    pub width: usize,
    pub classes: usize,
}

/// Three ReLU conv blocks with 2× average pooling between them, global mean
/// pooling and a linear head. Inputs are `(B, C, H, W)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: ClassifierArch,
    store: ParamStore,
    block1: Conv,
    block2: Conv,
    block3: Conv,
    head: Dense,
}

impl Classifier {
    pub fn new(arch: ClassifierArch, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let rng = RngStream::new(seed, 0).named("classifier-init");
        let mut s = ParamStore::new(dtype, device.clone());
        let w = arch.width;
        Ok(Self {
            block1: Conv::new(&mut s, "block1", arch.channels, w, 3, &rng)?,
            block2: Conv::new(&mut s, "block2", w, 2 * w, 3, &rng)?,
            block3: Conv::new(&mut s, "block3", 2 * w, 2 * w, 3, &rng)?,
            head: Dense::new(&mut s, "head", 2 * w, arch.classes, 1.0, &rng)?,
            arch,
            store: s,
        })
    }

    pub fn arch(&self) -> ClassifierArch {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn layer_names(&self) -> &'static [&'static str] {
        &FEATURE_LAYERS
    }

    /// Logits plus post-activation features of every block.
    pub fn forward_features(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let x = x.affine(2.0, -1.0)?;
        let f1 = self.block1.forward(&x)?.relu()?;
        let f2 = self.block2.forward(&f1.avg_pool2d(2)?)?.relu()?;
        let f3 = self.block3.forward(&f2.avg_pool2d(2)?)?.relu()?;
        let pooled = f3.mean(3)?.mean(2)?;
        Ok((self.head.forward(&pooled)?, vec![f1, f2, f3]))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_features(x)?.0)
    }

    /// Activations of the named layers.
    pub fn features(&self, x: &Tensor, layers: &[&str]) -> Result<Vec<Tensor>> {
        let (_, all) = self.forward_features(x)?;
        layers
            .iter()
            .map(|name| {
                FEATURE_LAYERS
                    .iter()
                    .position(|l| l == name)
                    .map(|i| all[i].clone())
                    .ok_or_else(|| Error::Layer(format!("classifier has no layer `{name}`")))
            })
            .collect()
    }

    pub fn predict_batch(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let t = stack_unit(chunk, self.dtype(), self.device())?;
            let idx: Vec<u32> = self.logits(&t)?.argmax(1)?.to_vec1()?;
            out.extend(idx.into_iter().map(|i| i as usize));
        }
        Ok(out)
    }

    pub fn predict(&self, img: &Image) -> Result<usize> {
        Ok(self.predict_batch(std::slice::from_ref(img))?[0])
    }

    pub fn accuracy(&self, images: &[Image], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Data("accuracy of an empty set".into()));
        }
        let pred = self.predict_batch(images)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / images.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "toy-classifier", "arch": self.arch });
        save_checkpoint(path, self.store.tensors(), &meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta) = load_checkpoint(path)?;
        if meta["kind"] != "toy-classifier" {
            return Err(Error::Data(format!("{} is not a classifier checkpoint", path.display())));
        }
        let arch: ClassifierArch = serde_json::from_value(meta["arch"].clone())?;
        let mut clf = Self::new(arch, 0, DType::F32, device)?;
        clf.store.load_from(&tensors)?;
        Ok(clf)
    }
}

/// Stacks images into a `(B, C, H, W)` tensor in `[0, 1]`.
pub fn stack_unit(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = images.iter().map(|im| im.to_unit_tensor(device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

pub fn train_toy_classifier(dataset: &ToyDataset, cfg: &ClassifierConfig, device: &Device) -> Result<(Classifier, ClassifierReport)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let (_, _, c) = dataset.check_uniform()?;
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= dataset.classes) {
        return Err(Error::Data(format!("label {bad} outside {} classes", dataset.classes)));
    }
    let arch = ClassifierArch { channels: c, width: cfg.width, classes: dataset.classes };
    let clf = Classifier::new(arch, cfg.seed, DType::F32, device)?;
    let mut opt = AdamW::new(clf.store.vars(), ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let rng = RngStream::new(cfg.seed, 0).named("classifier-train");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng.substream(epoch as u64).generator());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let imgs: Vec<Image> = chunk.iter().map(|&i| dataset.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let x = stack_unit(&imgs, DType::F32, device)?;
            let loss = cross_entropy(&clf.logits(&x)?, &labels)?;
            let v = loss.to_scalar::<f32>()? as f64;
            if !v.is_finite() {
                return Err(Error::Divergence { step: epoch, value: v });
            }
            opt.backward_step(&loss)?;
            total += v;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
        log::debug!("classifier epoch {epoch}: loss {:.4}", total / batches as f64);
    }
    let train_accuracy = clf.accuracy(&dataset.images, &dataset.labels)?;
    Ok((clf, ClassifierReport { epoch_losses, train_accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_layer_is_layer_error() {
        let arch = ClassifierArch { channels: 3, width: 4, classes: 2 };
        let clf = Classifier::new(arch, 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(clf.features(&x, &["block9"]), Err(Error::Layer(_))));
        let f = clf.features(&x, &["block2"]).unwrap();
        assert_eq!(f[0].dims(), &[1, 8, 4, 4]);
    }
}
