//! Hashed TF-IDF embedder used wherever a frozen pre-trained encoder is needed:
//! clustering, false-negative filtering and hardness measurement.
//!
//! Tokens are hashed with 64-bit FNV-1a (offset basis `0xcbf29ce484222325`,
//! prime `0x100000001b3`) over their UTF-8 bytes. The low bits pick the bucket
//! (`hash & (hash_dim - 1)`), the top bit picks the sign.

use crate::data::{tokenize, EmbeddingMatrix, PairDataset, Vocab};
use crate::{par, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hash_dim: usize,
    /// `true`: `ln((1+N)/(1+df)) + 1`. `false`: `ln(N/df) + 1` with unseen terms at `df = 1`.
    pub idf_smoothing: bool,
    pub normalize: bool,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hash_dim: 256,
            idf_smoothing: true,
            normalize: true,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim < 2 || !self.hash_dim.is_power_of_two() {
            return Err(Error::Config(format!(
                "surrogate.hash_dim must be a power of two >= 2, got {}",
                self.hash_dim
            )));
        }
        Ok(())
    }
}

/// Smoothed inverse document frequency; unseen terms use `df = 0`.
pub fn idf(vocab: &Vocab, term: &str) -> f64 {
    idf_from_counts(vocab.n_docs(), vocab.df(term), true)
}

pub fn idf_from_counts(n_docs: usize, df: u32, smoothing: bool) -> f64 {
    if smoothing {
        ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    } else {
        (n_docs.max(1) as f64 / df.max(1) as f64).ln() + 1.0
    }
}

/// Bucket and sign of a token under the documented hash.
pub fn hash_token(token: &str, hash_dim: usize) -> (usize, f64) {
    let h = fnv1a64(token.as_bytes());
    let bucket = (h & (hash_dim as u64 - 1)) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    (bucket, sign)
}

/// `tf × idf` per token, signed-hashed into `cfg.hash_dim` buckets.
pub fn embed_text(text: &str, vocab: &Vocab, cfg: &SurrogateConfig) -> Vec<f64> {
    let mut tf: HashMap<String, u32> = HashMap::new();
    for t in tokenize(text) {
        *tf.entry(t).or_default() += 1;
    }
    // Fixed summation order keeps the output bit-identical across runs.
    let mut terms: Vec<(String, u32)> = tf.into_iter().collect();
    terms.sort_unstable();

    let mut out = vec![0.0f64; cfg.hash_dim];
    for (term, count) in &terms {
        let w = *count as f64 * idf_from_counts(vocab.n_docs(), vocab.df(term), cfg.idf_smoothing);
        let (bucket, sign) = hash_token(term, cfg.hash_dim);
        out[bucket] += sign * w;
    }
    if cfg.normalize {
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Dot product `ψ(q)·φ(d)` with `f64` accumulation.
pub fn surrogate_score<T: Copy + Into<f64>>(q: &[T], d: &[T]) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::InvalidInput(format!(
            "surrogate_score: dimension mismatch {} vs {}",
            q.len(),
            d.len()
        )));
    }
    Ok(q.iter().zip(d).map(|(&a, &b)| a.into() * b.into()).sum())
}

/// A fitted surrogate: vocabulary statistics plus hashing config.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub vocab: Vocab,
    pub cfg: SurrogateConfig,
}

impl Surrogate {
    /// Document frequencies come from the training documents.
    pub fn fit(dataset: &PairDataset, cfg: SurrogateConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = crate::data::build_vocab(&dataset.pairs.iter().map(|p| p.document.text.as_str()).collect::<Vec<_>>());
        Ok(Self { vocab, cfg })
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        embed_text(text, &self.vocab, &self.cfg)
    }

    pub fn embed_all(&self, texts: &[String], ids: Vec<String>) -> Result<EmbeddingMatrix> {
        let rows = par::map(texts, |t| self.embed(t));
        let data = rows.into_iter().flatten().map(|x| x as f32).collect();
        EmbeddingMatrix::new(self.cfg.hash_dim, data, ids)
    }

    /// `(φ, ψ)`: document and query matrices, row-aligned with the pairs.
    pub fn embed_pairs(&self, dataset: &PairDataset) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        let docs: Vec<String> = dataset.pairs.iter().map(|p| p.document.text.clone()).collect();
        let queries: Vec<String> = dataset.pairs.iter().map(|p| p.query.text.clone()).collect();
        let phi = self.embed_all(&docs, dataset.pairs.iter().map(|p| p.document.id.clone()).collect())?;
        let psi = self.embed_all(&queries, dataset.pairs.iter().map(|p| p.query.id.clone()).collect())?;
        Ok((phi, psi))
    }
}
