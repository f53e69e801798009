//! Text embedders. Every implementation returns unit vectors of a fixed
//! dimension, and the same text always maps to the same vector.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::trainer::{embed_with_head, ProjectionHead};
use crate::vecmath::{normalize_in_place, EmbeddingVector};
use crate::Embedding;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        (**self).embed(text)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        (**self).embed_batch(texts)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut hash = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            hash ^= b as u64;
            hash = hash.wrapping_mul(FNV_PRIME);
        }
    }
    // final avalanche so low bits (the bucket) depend on every byte
    hash ^= hash >> 33;
    hash = hash.wrapping_mul(0xff51_afd7_ed55_8ccd);
    hash ^= hash >> 33;
    hash
}

/// Lowercase, map every non-alphanumeric char to a separator, split.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Deterministic signed feature hashing of unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        Self { dim }
    }

    fn accumulate(&self, acc: &mut [f64], parts: &[&[u8]]) {
        let h = fnv1a(parts);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    }

    pub fn embed_raw(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0f64; self.dim];
        if tokens.is_empty() {
            self.accumulate(&mut acc, &[b"e:"]);
        }
        for t in &tokens {
            self.accumulate(&mut acc, &[b"u:", t.as_bytes()]);
        }
        for w in tokens.windows(2) {
            self.accumulate(&mut acc, &[b"b:", w[0].as_bytes(), b" ", w[1].as_bytes()]);
        }
        if normalize_in_place(&mut acc) == 0.0 {
            // every feature cancelled; fall back to the empty-text bucket
            acc.iter_mut().for_each(|v| *v = 0.0);
            self.accumulate(&mut acc, &[b"e:"]);
            normalize_in_place(&mut acc);
        }
        acc
    }
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        EmbeddingVector::from_f64(&self.embed_raw(text))
    }
}

/// A frozen base embedder followed by a trained projection head.
pub struct ComposedEmbedder {
    base: Arc<dyn Embedder>,
    head: ProjectionHead<f64>,
}

impl ComposedEmbedder {
    pub fn new(base: Arc<dyn Embedder>, head: ProjectionHead<f64>) -> Result<Self> {
        if base.dim() != head.in_dim() {
            return Err(Error::DimensionMismatch { expected: head.in_dim(), got: base.dim() });
        }
        Ok(Self { base, head })
    }

    pub fn head(&self) -> &ProjectionHead<f64> {
        &self.head
    }
}

impl Embedder for ComposedEmbedder {
    fn dim(&self) -> usize {
        self.head.out_dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let base = self.base.embed(text)?;
        Ok(embed_with_head(&base.cast::<f64>(), &self.head)?.cast())
    }
}
