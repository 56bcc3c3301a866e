//! Text embeddings and the similarity kernel.
//!
//! Everything downstream (intent matching, dialogue context, retrieval,
//! accuracy scoring) works on [`Embedding`], a fixed-dimension unit vector.
//! Providers turn text into embeddings; [`HashEmbedder`] is the bundled
//! deterministic provider and [`ExternalEmbedder`] forwards to an HTTP
//! endpoint speaking `{"text": ..}` → `{"vector": [..]}`.
//!
//! The reference embedder is a bag of words: token order does not affect
//! the output (`"reset password"` and `"password reset"` embed identically).

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIMENSION: usize = 256;
pub const MIN_DIMENSION: usize = 8;
pub const DEFAULT_EXTERNAL_TIMEOUT_MS: u64 = 2_000;

const UNIT_NORM_TOLERANCE: f64 = 1e-6;

// Seeded FNV-1a, 64 bit.
const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("text is empty or contains no tokens")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector has zero or non-finite norm")]
    ZeroVector,
    #[error("vector is not unit norm (norm = {0})")]
    NotUnitNorm(f64),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid embedding configuration: {0}")]
    InvalidConfig(String),
}

/// A unit-norm vector. Cloning is cheap (shared storage).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Arc<[f64]>);

impl Embedding {
    /// Scales `values` to unit length.
    pub fn normalize(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit length, rejecting anything else.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroVector);
        }
        let norm = l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm(norm));
        }
        Ok(Self(values.into()))
    }

    /// Normalized weighted sum of embeddings.
    pub fn weighted_sum<'a, I>(terms: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (f64, &'a Embedding)>,
    {
        let mut acc: Option<Vec<f64>> = None;
        for (weight, emb) in terms {
            let acc = acc.get_or_insert_with(|| vec![0.0; emb.dimension()]);
            if acc.len() != emb.dimension() {
                return Err(EmbeddingError::DimensionMismatch {
                    left: acc.len(),
                    right: emb.dimension(),
                });
            }
            for (a, v) in acc.iter_mut().zip(emb.values()) {
                *a += weight * v;
            }
        }
        Self::normalize(acc.ok_or(EmbeddingError::ZeroVector)?)
    }

    /// Re-normalized arithmetic mean.
    pub fn centroid<'a, I>(embeddings: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = &'a Embedding>,
    {
        Self::weighted_sum(embeddings.into_iter().map(|e| (1.0, e)))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_unit(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0.to_vec()
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two embeddings. Both are unit length, so this is
/// their dot product (clamped against rounding to `[-1, 1]`).
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError>;
}

/// Lowercases `text` and splits it on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Seeded FNV-1a over the UTF-8 bytes of a token.
pub fn token_hash(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET_BASIS ^ HASH_SEED, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Deterministic feature-hashing embedder: each token increments the bucket
/// `token_hash(token) % dimension`, and the count vector is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < MIN_DIMENSION {
            return Err(EmbeddingError::InvalidConfig(format!(
                "dimension must be at least {MIN_DIMENSION}, got {dimension}"
            )));
        }
        Ok(Self { dimension })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut counts = vec![0.0; self.dimension];
        for token in &tokens {
            counts[(token_hash(token) % self.dimension as u64) as usize] += 1.0;
        }
        Embedding::normalize(counts)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

/// Provider backed by an HTTP endpoint. Returned vectors are normalized and
/// checked against the configured dimension.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    endpoint: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

impl ExternalEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        dimension: usize,
        timeout: Duration,
    ) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            dimension,
            client,
        })
    }
}

impl EmbeddingProvider for ExternalEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let unavailable = |e: reqwest::Error| EmbeddingError::ProviderUnavailable(e.to_string());
        let response: EmbedResponse = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { text })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(unavailable)?
            .json()
            .map_err(unavailable)?;
        if response.vector.len() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                left: self.dimension,
                right: response.vector.len(),
            });
        }
        Embedding::normalize(response.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    ReferenceHash,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub provider: ProviderKind,
    pub dimension: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::ReferenceHash,
            dimension: DEFAULT_DIMENSION,
            endpoint: None,
            timeout_ms: DEFAULT_EXTERNAL_TIMEOUT_MS,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dimension < MIN_DIMENSION {
            return Err(EmbeddingError::InvalidConfig(format!(
                "embedding.dimension must be at least {MIN_DIMENSION}"
            )));
        }
        if self.provider == ProviderKind::External && self.endpoint.is_none() {
            return Err(EmbeddingError::InvalidConfig(
                "external embedding provider requires embedding.endpoint".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
        self.validate()?;
        Ok(match self.provider {
            ProviderKind::ReferenceHash => Arc::new(HashEmbedder::new(self.dimension)?),
            ProviderKind::External => Arc::new(ExternalEmbedder::new(
                self.endpoint.clone().unwrap_or_default(),
                self.dimension,
                Duration::from_millis(self.timeout_ms),
            )?),
        })
    }
}
