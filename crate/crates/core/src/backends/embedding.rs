//! Offline embedding providers.

use super::{BackendError, EmbeddingProvider};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Deterministic pseudo-embedding: every distinct string maps to a seeded
/// random unit vector with non-negative components, so cosine similarities
/// stay in [0, 1] and identical strings score exactly 1.
pub struct HashEmbeddingProvider {
    dim: usize,
    seed: u64,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0);
        Self { dim, seed }
    }
}

impl Default for HashEmbeddingProvider {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x.abs()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::Embedding {
                text: text.to_string(),
                reason: "degenerate zero vector".into(),
            });
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

/// Similarity is 1 for equal strings and 0 otherwise. Retrieval through this
/// provider reduces to exact label lookup, which makes it the default for
/// deterministic offline runs.
pub struct ExactMatchProvider {
    inner: HashEmbeddingProvider,
}

impl ExactMatchProvider {
    pub fn new() -> Self {
        Self {
            inner: HashEmbeddingProvider::new(8, 0),
        }
    }
}

impl Default for ExactMatchProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl EmbeddingProvider for ExactMatchProvider {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.inner.embed(text)
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64, BackendError> {
        Ok(if a == b { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embeddings_are_unit_norm_and_deterministic() {
        let provider = HashEmbeddingProvider::default();
        for text in ["chair", "table", "boxes stack", ""] {
            let a = provider.embed(text).unwrap();
            let b = provider.embed(text).unwrap();
            assert_eq!(a, b);
            let norm: f64 = a
                .iter()
                .map(|x| f64::from(*x) * f64::from(*x))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");
            assert!(a.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn hash_similarity_is_self_one_and_nonnegative() {
        let provider = HashEmbeddingProvider::default();
        assert_eq!(provider.similarity("chair", "chair").unwrap(), 1.0);
        let s = provider.similarity("chair", "table").unwrap();
        assert!((0.0..1.0).contains(&s), "{s}");
    }

    #[test]
    fn distinct_seeds_give_distinct_spaces() {
        let a = HashEmbeddingProvider::new(64, 1).embed("chair").unwrap();
        let b = HashEmbeddingProvider::new(64, 2).embed("chair").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn exact_match_is_binary() {
        let provider = ExactMatchProvider::new();
        assert_eq!(provider.similarity("chair", "chair").unwrap(), 1.0);
        assert_eq!(provider.similarity("chair", "Chair").unwrap(), 0.0);
        let norm: f64 = provider
            .embed("chair")
            .unwrap()
            .iter()
            .map(|x| f64::from(*x) * f64::from(*x))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-4);
    }
}
