use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::corpus::segment;
use crate::http::{HttpError, JsonClient, RemoteConfig};

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self, RetrievalError> {
        let norm = values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(RetrievalError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        Ok(EmbeddingVector { values })
    }

    /// Accepts an already-normalized vector as is.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, RetrievalError> {
        let norm = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(RetrievalError::Protocol(format!("vector norm {norm} is not 1")));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity of two unit vectors.
    pub fn dot(&self, other: &EmbeddingVector) -> f32 {
        dot(&self.values, &other.values)
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    // fold -0.0 into 0.0 so ordering treats them as equal
    acc + 0.0
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Recorded in persisted indexes and checked on load.
    fn identifier(&self) -> String;

    /// One vector per input, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError>;
}

pub fn embed_text(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    embedder
        .embed_batch(&[text])?
        .pop()
        .ok_or_else(|| RetrievalError::Protocol("empty embedding batch".into()))
}

/// Feature-hashed term frequencies over lowercased word/punctuation tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTfEmbedder {
    dim: usize,
}

impl HashedTfEmbedder {
    pub const DEFAULT_DIM: usize = 4096;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedTfEmbedder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.to_lowercase().as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let mut tf = vec![0.0f32; self.dim];
        let mut any = false;
        for (s, e) in segment(text) {
            tf[self.bucket(&text[s..e])] += 1.0;
            any = true;
        }
        if !any {
            return Err(RetrievalError::EmptyText);
        }
        EmbeddingVector::normalized(tf)
    }
}

impl Default for HashedTfEmbedder {
    fn default() -> Self {
        HashedTfEmbedder::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashedTfEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn identifier(&self) -> String {
        format!("hashed-tf-fnv1a:{}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

/// Client for an embedding service speaking the `/embed` protocol.
pub struct RemoteEmbedder {
    client: JsonClient,
    dim: usize,
}

impl RemoteEmbedder {
    /// Connects and learns the dimension from a probe request.
    pub fn connect(config: &RemoteConfig) -> Result<Self, RetrievalError> {
        let client = JsonClient::new(config).map_err(|e| map_err(&config.endpoint, e))?;
        let mut embedder = RemoteEmbedder { client, dim: 0 };
        let probe = embedder.request(&["probe"])?;
        embedder.dim = probe.dim;
        Ok(embedder)
    }

    fn request(&self, texts: &[&str]) -> Result<EmbedResponse, RetrievalError> {
        let resp: EmbedResponse = self
            .client
            .post("/embed", &EmbedRequest { texts })
            .map_err(|e| map_err(self.client.endpoint(), e))?;
        if resp.vectors.len() != texts.len() {
            return Err(RetrievalError::Protocol(format!(
                "sent {} texts, got {} vectors",
                texts.len(),
                resp.vectors.len()
            )));
        }
        if let Some(v) = resp.vectors.iter().find(|v| v.len() != resp.dim) {
            return Err(RetrievalError::DimensionMismatch {
                expected: resp.dim,
                got: v.len(),
            });
        }
        Ok(resp)
    }
}

fn map_err(endpoint: &str, e: HttpError) -> RetrievalError {
    match e {
        HttpError::Unavailable {
            attempts,
            last_error,
        } => RetrievalError::EmbedderUnavailable {
            endpoint: endpoint.to_string(),
            attempts,
            last_error,
        },
        HttpError::Protocol(m) => RetrievalError::Protocol(m),
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn identifier(&self) -> String {
        format!("remote:{}:{}", self.client.endpoint(), self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self.request(texts)?;
        if resp.dim != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: resp.dim,
            });
        }
        resp.vectors
            .into_iter()
            .map(EmbeddingVector::normalized)
            .collect()
    }
}
