//! Corpus ingest, tokenization, and sample emission.

mod remote;
mod samples;
mod tokenize;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::RemoteTokenizer;
pub use samples::{
    read_samples, write_samples, DependencyRecord, SampleRecord, SampleWriter, SCHEMA_VERSION,
};
pub use tokenize::{
    segment, tokenize_document, TokenSequence, Tokenizer, Vocabulary, VocabularyBuilder, WordTokenizer,
    SEP_TOKEN, UNK_TOKEN,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("document {0} has no text")]
    EmptyDocument(String),
    #[error("token {token:?} is not in the vocabulary and no unknown id is configured")]
    UnknownToken { token: String },
    #[error("failed writing {path} (partial output left there): {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tokenizer at {endpoint} unavailable after {attempts} attempts: {last_error}")]
    TokenizerUnavailable {
        endpoint: String,
        attempts: u32,
        last_error: String,
    },
    #[error("tokenizer protocol error: {0}")]
    TokenizerProtocol(String),
    #[error("{path}:{line}: invalid sample record: {message}")]
    BadSample {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl CorpusError {
    /// Record-level errors leave the stream usable; everything else ends it.
    pub fn is_record_level(&self) -> bool {
        matches!(self, CorpusError::Record { .. })
    }

    /// Failures that will recur for every document.
    pub fn is_systemic(&self) -> bool {
        matches!(
            self,
            CorpusError::Unreadable { .. }
                | CorpusError::TokenizerUnavailable { .. }
                | CorpusError::Write { .. }
        )
    }
}

/// One source or retrieval-corpus document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source_tag: String,
}

#[derive(Deserialize)]
struct RawDocument {
    id: Option<serde_json::Value>,
    text: Option<String>,
    source_tag: Option<String>,
}

/// Streams documents from a line-delimited JSON file.
///
/// Malformed lines surface as [`CorpusError::Record`] and iteration carries
/// on; an I/O failure is yielded once and ends the stream.
pub struct DocumentReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    remaining: Option<usize>,
    seen: HashSet<String>,
    done: bool,
}

/// Opens `path` for streaming. `limit` caps the number of documents yielded
/// (record errors do not count against it).
pub fn ingest_documents(path: &Path, limit: Option<usize>) -> Result<DocumentReader, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(DocumentReader {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
        remaining: limit,
        seen: HashSet::new(),
        done: false,
    })
}

impl DocumentReader {
    fn record_error(&self, message: impl Into<String>) -> CorpusError {
        CorpusError::Record {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn parse(&mut self, line: &str) -> Result<Document, CorpusError> {
        let raw: RawDocument =
            serde_json::from_str(line).map_err(|e| self.record_error(e.to_string()))?;
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(self.record_error("field \"id\" must be a string")),
            None => return Err(self.record_error("missing field \"id\"")),
        };
        let text = raw
            .text
            .ok_or_else(|| self.record_error("missing field \"text\""))?;
        if text.trim().is_empty() {
            return Err(self.record_error(format!("document {id} has empty text")));
        }
        if !self.seen.insert(id.clone()) {
            return Err(self.record_error(format!("duplicate id {id}")));
        }
        Ok(Document {
            id,
            text,
            source_tag: raw.source_tag.unwrap_or_default(),
        })
    }
}

impl Iterator for DocumentReader {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.remaining == Some(0) {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(source) => {
                    self.done = true;
                    return Some(Err(CorpusError::Unreadable {
                        path: self.path.clone(),
                        source,
                    }));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = self.parse(&line);
            if parsed.is_ok() {
                if let Some(n) = self.remaining.as_mut() {
                    *n -= 1;
                }
            }
            return Some(parsed);
        }
    }
}

/// Reads a whole corpus, splitting valid documents from record errors.
/// Fatal errors are returned as `Err`.
pub fn read_corpus(
    path: &Path,
    limit: Option<usize>,
) -> Result<(Vec<Document>, Vec<CorpusError>), CorpusError> {
    let mut docs = Vec::new();
    let mut errors = Vec::new();
    for item in ingest_documents(path, limit)? {
        match item {
            Ok(doc) => docs.push(doc),
            Err(e) if e.is_record_level() => {
                log::warn!("{e}");
                errors.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((docs, errors))
}
