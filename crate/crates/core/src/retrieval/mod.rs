//! Query windows, text embedding, and exact top-K cosine retrieval.

mod embed;
mod index;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, TokenSequence};

pub use embed::{embed_text, Embedder, EmbeddingVector, HashedTfEmbedder, RemoteEmbedder};
pub use index::{build_index, chunk_document, retrieve_top_k, IndexChunk, IndexEntry, RetrievalIndex};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("anchor {anchor} outside document of {len} tokens")]
    PositionOutOfRange { anchor: usize, len: usize },
    #[error("query window must be at least 1")]
    InvalidWindow,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedder at {endpoint} unavailable after {attempts} attempts: {last_error}")]
    EmbedderUnavailable {
        endpoint: String,
        attempts: u32,
        last_error: String,
    },
    #[error("embedder protocol error: {0}")]
    Protocol(String),
    #[error("index build failed: {0}")]
    IndexBuild(String),
    #[error("embedding dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}:{line}: {message}")]
    IndexFormat {
        path: std::path::PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl RetrievalError {
    pub fn is_systemic(&self) -> bool {
        match self {
            RetrievalError::EmbedderUnavailable { .. } => true,
            RetrievalError::Corpus(e) => e.is_systemic(),
            _ => false,
        }
    }
}

/// Window of tokens centred on an anchor, detokenized for embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub doc_id: String,
    pub anchor: usize,
    pub window: usize,
    /// Token span `[start, end)` of the window.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Takes `window` tokens on each side of `anchor`, clipped to the document.
/// The query text is the span of `text` those tokens cover.
pub fn extract_query(
    seq: &TokenSequence,
    text: &str,
    anchor: usize,
    window: usize,
) -> Result<Query, RetrievalError> {
    if window == 0 {
        return Err(RetrievalError::InvalidWindow);
    }
    if anchor >= seq.len() {
        return Err(RetrievalError::PositionOutOfRange {
            anchor,
            len: seq.len(),
        });
    }
    let start = anchor.saturating_sub(window);
    let end = (anchor + window + 1).min(seq.len());
    Ok(Query {
        doc_id: seq.doc_id.clone(),
        anchor,
        window,
        start,
        end,
        text: text[seq.char_offsets[start].0..seq.char_offsets[end - 1].1].to_string(),
    })
}

/// One retrieved chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source_doc_id: String,
    pub chunk_tokens: Vec<u32>,
    pub similarity: f64,
    pub rank: usize,
}
