//! Line-delimited sample records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::assembly::{Strategy, TrainingSample};
use crate::retrieval::Candidate;
use crate::verification::VerifiedDependency;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyRecord {
    pub source_doc_id: String,
    pub anchor_position: usize,
    pub gain: f64,
    pub base_entropy: f64,
    pub conditioned_entropy: f64,
    pub similarity: f64,
    pub rank: usize,
    /// Chunk location in `tokens`.
    pub offset: usize,
    pub length: usize,
}

/// On-disk form of a [`TrainingSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub schema_version: String,
    pub root_doc_id: String,
    pub strategy: Strategy,
    pub total_tokens: usize,
    pub root_offset: usize,
    pub permutation: Vec<usize>,
    pub separator_positions: Vec<usize>,
    pub dependencies: Vec<DependencyRecord>,
    pub tokens: Vec<u32>,
}

impl From<&TrainingSample> for SampleRecord {
    fn from(s: &TrainingSample) -> Self {
        SampleRecord {
            schema_version: SCHEMA_VERSION.to_string(),
            root_doc_id: s.root_doc_id.clone(),
            strategy: s.strategy,
            total_tokens: s.total_tokens,
            root_offset: s.root_offset,
            permutation: s.permutation.clone(),
            separator_positions: s.separator_positions.clone(),
            dependencies: s
                .dependencies
                .iter()
                .zip(&s.chunk_offsets)
                .map(|(d, &offset)| DependencyRecord {
                    source_doc_id: d.candidate.source_doc_id.clone(),
                    anchor_position: d.anchor,
                    gain: d.gain,
                    base_entropy: d.base_entropy,
                    conditioned_entropy: d.conditioned_entropy,
                    similarity: d.candidate.similarity,
                    rank: d.candidate.rank,
                    offset,
                    length: d.candidate.chunk_tokens.len(),
                })
                .collect(),
            tokens: s.tokens.clone(),
        }
    }
}

impl SampleRecord {
    pub fn into_sample(self) -> Result<TrainingSample, String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.total_tokens != self.tokens.len() {
            return Err(format!(
                "total_tokens {} but {} tokens",
                self.total_tokens,
                self.tokens.len()
            ));
        }
        if self.root_offset > self.tokens.len() {
            return Err("root_offset beyond token stream".into());
        }
        let m = self.dependencies.len();
        let mut seen = vec![false; m];
        for &p in &self.permutation {
            if p >= m || std::mem::replace(&mut seen[p], true) {
                return Err("permutation is not a bijection".into());
            }
        }
        if self.permutation.len() != m {
            return Err("permutation is not a bijection".into());
        }
        let mut dependencies = Vec::with_capacity(m);
        let mut chunk_offsets = Vec::with_capacity(m);
        for d in self.dependencies {
            let end = d.offset + d.length;
            if end > self.root_offset {
                return Err(format!("chunk of {} overlaps the root", d.source_doc_id));
            }
            chunk_offsets.push(d.offset);
            dependencies.push(VerifiedDependency {
                candidate: Candidate {
                    source_doc_id: d.source_doc_id,
                    chunk_tokens: self.tokens[d.offset..end].to_vec(),
                    similarity: d.similarity,
                    rank: d.rank,
                },
                anchor: d.anchor_position,
                base_entropy: d.base_entropy,
                conditioned_entropy: d.conditioned_entropy,
                gain: d.gain,
            });
        }
        Ok(TrainingSample {
            root_doc_id: self.root_doc_id,
            dependencies,
            permutation: self.permutation,
            chunk_offsets,
            root_offset: self.root_offset,
            separator_positions: self.separator_positions,
            total_tokens: self.total_tokens,
            tokens: self.tokens,
            strategy: self.strategy,
        })
    }
}

/// Streaming writer; one JSON object per line.
pub struct SampleWriter {
    path: PathBuf,
    out: BufWriter<File>,
    written: usize,
}

impl SampleWriter {
    pub fn create(path: &Path) -> Result<Self, CorpusError> {
        let file = File::create(path).map_err(|source| CorpusError::Write {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(SampleWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            written: 0,
        })
    }

    pub fn write(&mut self, sample: &TrainingSample) -> Result<(), CorpusError> {
        let line = serde_json::to_string(&SampleRecord::from(sample)).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|source| CorpusError::Write {
            path: self.path.clone(),
            source,
        })?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize, CorpusError> {
        self.out.flush().map_err(|source| CorpusError::Write {
            path: self.path.clone(),
            source,
        })?;
        Ok(self.written)
    }
}

pub fn write_samples<'a, I>(samples: I, path: &Path) -> Result<usize, CorpusError>
where
    I: IntoIterator<Item = &'a TrainingSample>,
{
    let mut w = SampleWriter::create(path)?;
    for s in samples {
        w.write(s)?;
    }
    w.finish()
}

pub fn read_samples(path: &Path) -> Result<Vec<TrainingSample>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CorpusError::BadSample {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        samples.push(record.into_sample().map_err(bad)?);
    }
    Ok(samples)
}
