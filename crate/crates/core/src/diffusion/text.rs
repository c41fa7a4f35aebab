use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Fixed word-embedding table standing in for a pretrained text encoder's
/// input layer. Rows are seeded standard-normal vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoder {
    vocab: Vec<String>,
    dim: usize,
    table: Vec<f32>,
}

impl TextEncoder {
    pub fn new(vocab: &[&str], dim: usize, seed: u64) -> Self {
        let rng = RngStream::new(seed, 0).named("word-embeddings");
        let table = rng.normal_vec(vocab.len() * dim);
        Self { vocab: vocab.iter().map(|s| s.to_string()).collect(), dim, table }
    }

    /// Vocabulary shared by the toy denoiser and its prompts.
    pub fn toy(dim: usize, classes: usize, seed: u64) -> Self {
        let mut words: Vec<String> = ["clean", "adversarial", "photo", "sticker", "noise", "natural", "patch"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(crate::data::class_names(classes));
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        Self::new(&refs, dim, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_embedding(&self, word: &str) -> Result<&[f32]> {
        let i = self
            .vocab
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Param(format!("unknown token `{word}`")))?;
        Ok(&self.table[i * self.dim..(i + 1) * self.dim])
    }

    /// Embeds whitespace-separated words as an `n × dim` row-major buffer.
    pub fn embed_rows(&self, text: &str) -> Result<Vec<Vec<f32>>> {
        text.split_whitespace().map(|w| self.token_embedding(w).map(<[f32]>::to_vec)).collect()
    }

    /// `n × dim` tensor of the words in `text`.
    pub fn embed(&self, text: &str, dtype: DType, device: &Device) -> Result<Tensor> {
        let rows = self.embed_rows(text)?;
        if rows.is_empty() {
            return Err(Error::Param("no tokens to embed".into()));
        }
        let n = rows.len();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        Ok(Tensor::from_vec(flat, (n, self.dim), device)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_seeded_and_distinct() {
        let a = TextEncoder::toy(8, 4, 1);
        let b = TextEncoder::toy(8, 4, 1);
        assert_eq!(a.token_embedding("clean").unwrap(), b.token_embedding("clean").unwrap());
        assert_ne!(a.token_embedding("clean").unwrap(), a.token_embedding("adversarial").unwrap());
        assert!(a.token_embedding("grating3").is_ok());
        assert!(matches!(a.embed("unknown", DType::F32, &Device::Cpu), Err(Error::Param(_))));
        let t = a.embed("clean photo", DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 8]);
    }
}
