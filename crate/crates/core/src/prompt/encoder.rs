use std::collections::HashMap;
use std::ops::Add;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::EmbeddingFile;
use crate::{Error, Result};

/// A text (or image) embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let d = self.norm() * other.norm();
        if d < crate::tensor::NORM_EPS {
            0.0
        } else {
            dot / d
        }
    }
}

impl Add<&Embedding> for &Embedding {
    type Output = Embedding;

    /// Elementwise `self + rhs`, in that operand order.
    fn add(self, rhs: &Embedding) -> Embedding {
        assert_eq!(self.dim(), rhs.dim(), "embedding dimensions differ");
        Embedding(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

/// Maps strings to embeddings of a fixed dimension. Implementations must be
/// deterministic.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Embedding>;
    /// Short identifier recorded in provenance strings.
    fn identifier(&self) -> String;
}

/// Offline stand-in for a pretrained text encoder: a seeded hash of the string
/// drives a Gaussian draw that is then unit-normalized.
#[derive(Debug, Clone)]
pub struct FakeEncoder {
    dim: usize,
    seed: u64,
}

impl FakeEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config(format!(
                "fake encoder dimension must be at least 2, got {dim}"
            )));
        }
        Ok(Self { dim, seed })
    }
}

impl TextEncoder for FakeEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let raw: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Embedding(raw.iter().map(|v| (v / norm) as f32).collect()))
    }

    fn identifier(&self) -> String {
        format!("fake:{}:{}", self.dim, self.seed)
    }
}

/// Looks strings up in a table loaded from an embedding file.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    dim: usize,
    table: HashMap<String, Embedding>,
    source: String,
}

impl FileEncoder {
    pub fn from_file(file: EmbeddingFile, source: impl Into<String>) -> Self {
        let dim = file.dim as usize;
        let table = file
            .records
            .into_iter()
            .map(|r| (r.name, Embedding(r.values)))
            .collect();
        Self {
            dim,
            table,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl TextEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::config(format!("no embedding for {text:?} in {}", self.source)))
    }

    fn identifier(&self) -> String {
        format!("file:{}", self.source)
    }
}
