use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::dot;
use super::{embed_text, Candidate, Embedder, EmbeddingVector, Query, RetrievalError};
use crate::corpus::{Document, Tokenizer};

const EMBED_BATCH: usize = 256;
#[cfg(feature = "parallel")]
const PARALLEL_SCAN_MIN: usize = 4096;
const INDEX_FORMAT: &str = "entropylong-index";
const INDEX_VERSION: u32 = 1;

/// A retrieval unit before embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexChunk {
    pub doc_id: String,
    /// Source text covered by `tokens`; this is what gets embedded.
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Tokenizes `doc` and keeps its first `max_tokens` tokens.
pub fn chunk_document(
    doc: &Document,
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
) -> Result<IndexChunk, RetrievalError> {
    let (mut tokens, offsets) = tokenizer.encode(&doc.text)?;
    if tokens.is_empty() || max_tokens == 0 {
        return Err(RetrievalError::EmptyText);
    }
    tokens.truncate(max_tokens);
    let end = offsets[tokens.len() - 1].1;
    Ok(IndexChunk {
        doc_id: doc.id.clone(),
        text: doc.text[..end].to_string(),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: String,
    pub vector: EmbeddingVector,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Immutable exact-scan cosine index.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    embedder_id: String,
    entries: Vec<IndexEntry>,
}

pub fn build_index<I>(chunks: I, embedder: &dyn Embedder) -> Result<RetrievalIndex, RetrievalError>
where
    I: IntoIterator<Item = IndexChunk>,
{
    let chunks: Vec<IndexChunk> = chunks.into_iter().collect();
    if chunks.is_empty() {
        return Err(RetrievalError::IndexBuild("no chunks to index".into()));
    }
    let dim = embedder.dim();
    let mut entries = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(EMBED_BATCH) {
        let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        if vectors.len() != batch.len() {
            return Err(RetrievalError::IndexBuild(format!(
                "embedder returned {} vectors for {} chunks",
                vectors.len(),
                batch.len()
            )));
        }
        for (chunk, vector) in batch.iter().zip(vectors) {
            if vector.dim() != dim {
                return Err(RetrievalError::IndexBuild(format!(
                    "chunk {} embedded with dimension {} instead of {dim}",
                    chunk.doc_id,
                    vector.dim()
                )));
            }
            entries.push(IndexEntry {
                doc_id: chunk.doc_id.clone(),
                vector,
                text: chunk.text.clone(),
                tokens: chunk.tokens.clone(),
            });
        }
    }
    Ok(RetrievalIndex {
        dim,
        embedder_id: embedder.identifier(),
        entries,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
    embedder: String,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredEntry {
    doc_id: String,
    text: String,
    vector: Vec<f32>,
}

/// Descending similarity, then ascending doc id, then insertion order.
fn rank_order(entries: &[IndexEntry], a: &(f32, usize), b: &(f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| entries[a.1].doc_id.cmp(&entries[b.1].doc_id))
        .then(a.1.cmp(&b.1))
}

impl RetrievalIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Drops entries whose token content repeats an earlier entry. Returns
    /// how many were removed.
    pub fn dedup_exact(&mut self) -> usize {
        let before = self.entries.len();
        let mut seen = HashSet::new();
        self.entries.retain(|e| seen.insert(e.tokens.clone()));
        before - self.entries.len()
    }

    fn scores(&self, query: &EmbeddingVector, exclude: &HashSet<String>) -> Vec<(f32, usize)> {
        // skipping the query's zero coordinates leaves every partial sum
        // unchanged, so the sparse path gives exactly the dense result
        let q = query.values();
        let nonzero: Vec<(usize, f32)> =
            q.iter().copied().enumerate().filter(|&(_, x)| x != 0.0).collect();
        let sparse = nonzero.len() * 4 < q.len();
        let similarity = |v: &[f32]| {
            if sparse {
                nonzero.iter().fold(0.0f32, |acc, &(j, x)| acc + x * v[j]) + 0.0
            } else {
                dot(q, v)
            }
        };
        let score = |(i, e): (usize, &IndexEntry)| {
            (!exclude.contains(&e.doc_id)).then(|| (similarity(e.vector.values()), i))
        };
        #[cfg(feature = "parallel")]
        if self.entries.len() >= PARALLEL_SCAN_MIN {
            return self.entries.par_iter().enumerate().filter_map(score).collect();
        }
        self.entries.iter().enumerate().filter_map(score).collect()
    }

    /// The `k` entries most similar to `query`, skipping `exclude`d doc ids.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<Candidate>, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let mut scored = self.scores(query, exclude);
        let order = |a: &(f32, usize), b: &(f32, usize)| rank_order(&self.entries, a, b);
        if k == 0 {
            return Ok(Vec::new());
        }
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(rank, (sim, i))| Candidate {
                source_doc_id: self.entries[i].doc_id.clone(),
                chunk_tokens: self.entries[i].tokens.clone(),
                similarity: (sim as f64).clamp(-1.0, 1.0),
                rank,
            })
            .collect())
    }

    /// Writes a header line followed by one `(doc_id, text, vector)` record
    /// per entry.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let header = Header {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            dim: self.dim,
            embedder: self.embedder_id.clone(),
            entries: self.entries.len(),
        };
        let line = serde_json::to_string(&header).expect("header serializes");
        writeln!(out, "{line}").map_err(io)?;
        for e in &self.entries {
            let stored = StoredEntry {
                doc_id: e.doc_id.clone(),
                text: e.text.clone(),
                vector: e.vector.values().to_vec(),
            };
            let line = serde_json::to_string(&stored).expect("entry serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Loads an index written by [`save`](Self::save), checking that it was
    /// produced by `embedder`. Chunk texts are re-tokenized with `tokenizer`.
    pub fn load(
        path: &Path,
        embedder: &dyn Embedder,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self, RetrievalError> {
        let mut index = Self::load_untokenized(path, embedder)?;
        index.retokenize(tokenizer, usize::MAX)?;
        Ok(index)
    }

    /// Re-derives every entry's tokens from its text, keeping at most
    /// `max_tokens` of them.
    pub fn retokenize(
        &mut self,
        tokenizer: &dyn Tokenizer,
        max_tokens: usize,
    ) -> Result<(), RetrievalError> {
        for e in &mut self.entries {
            let (mut tokens, _) = tokenizer.encode(&e.text)?;
            tokens.truncate(max_tokens);
            e.tokens = tokens;
        }
        Ok(())
    }

    /// Like [`load`](Self::load) but leaves entry tokens empty; call
    /// [`retokenize`](Self::retokenize) before searching.
    pub fn load_untokenized(path: &Path, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let io = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bad = |line: usize, message: String| RetrievalError::IndexFormat {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
        let first = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))?
            .map_err(io)?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(bad(
                1,
                format!("unsupported index {} v{}", header.format, header.version),
            ));
        }
        if header.dim != embedder.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: embedder.dim(),
                got: header.dim,
            });
        }
        if header.embedder != embedder.identifier() {
            return Err(bad(
                1,
                format!(
                    "index built with embedder {} but {} is configured",
                    header.embedder,
                    embedder.identifier()
                ),
            ));
        }
        let mut entries = Vec::with_capacity(header.entries);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(io)?;
            let stored: StoredEntry =
                serde_json::from_str(&line).map_err(|e| bad(line_no, e.to_string()))?;
            if stored.vector.len() != header.dim {
                return Err(bad(
                    line_no,
                    format!("vector of dimension {}", stored.vector.len()),
                ));
            }
            entries.push(IndexEntry {
                doc_id: stored.doc_id,
                vector: EmbeddingVector::from_unit(stored.vector)
                    .map_err(|e| bad(line_no, e.to_string()))?,
                text: stored.text,
                tokens: Vec::new(),
            });
        }
        if entries.len() != header.entries {
            return Err(bad(
                entries.len() + 1,
                format!("expected {} entries, found {}", header.entries, entries.len()),
            ));
        }
        if entries.is_empty() {
            return Err(RetrievalError::IndexBuild("index has no entries".into()));
        }
        Ok(RetrievalIndex {
            dim: header.dim,
            embedder_id: header.embedder,
            entries,
        })
    }
}

/// Embeds the query text and returns its top-`k` candidates.
pub fn retrieve_top_k(
    index: &RetrievalIndex,
    embedder: &dyn Embedder,
    query: &Query,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Candidate>, RetrievalError> {
    let vector = embed_text(embedder, &query.text)?;
    index.search(&vector, k, exclude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WordTokenizer;
    use crate::retrieval::HashedTfEmbedder;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            source_tag: String::new(),
        }
    }

    fn fixture() -> (Vec<Document>, WordTokenizer) {
        let docs = vec![
            doc("a", "red apples grow on trees"),
            doc("b", "blue whales swim in oceans"),
            doc("c", "red apples and green apples"),
        ];
        let tok = WordTokenizer::fit(docs.iter().map(|d| d.text.as_str()));
        (docs, tok)
    }

    fn index_of(docs: &[Document], tok: &WordTokenizer) -> RetrievalIndex {
        let chunks = docs.iter().map(|d| chunk_document(d, tok, 1024).unwrap());
        build_index(chunks, &HashedTfEmbedder::new(256)).unwrap()
    }

    #[test]
    fn one_entry_per_chunk() {
        let (docs, tok) = fixture();
        let idx = index_of(&docs, &tok);
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.dim(), 256);
    }

    #[test]
    fn duplicate_ids_are_kept() {
        let (mut docs, tok) = fixture();
        docs.push(doc("a", "red apples again"));
        assert_eq!(index_of(&docs, &tok).len(), 4);
    }

    #[test]
    fn empty_stream_fails() {
        let e = build_index(Vec::new(), &HashedTfEmbedder::new(8));
        assert!(matches!(e, Err(RetrievalError::IndexBuild(_))));
    }

    #[test]
    fn exclusion_and_short_results() {
        let (docs, tok) = fixture();
        let idx = index_of(&docs, &tok);
        let e = HashedTfEmbedder::new(256);
        let q = embed_text(&e, "red apples").unwrap();
        let all = idx.search(&q, 10, &HashSet::new()).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.iter().map(|c| c.rank).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(all.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        let excl: HashSet<String> = ["c".to_string()].into();
        let some = idx.search(&q, 10, &excl).unwrap();
        assert!(some.iter().all(|c| c.source_doc_id != "c"));
        assert_eq!(some.len(), 2);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let (_, tok) = fixture();
        let docs = vec![doc("z", "red apples"), doc("m", "red apples"), doc("q", "red apples")];
        let idx = index_of(&docs, &tok);
        let q = embed_text(&HashedTfEmbedder::new(256), "apples").unwrap();
        let ids: Vec<_> = idx
            .search(&q, 2, &HashSet::new())
            .unwrap()
            .into_iter()
            .map(|c| c.source_doc_id)
            .collect();
        assert_eq!(ids, ["m", "q"]);
    }

    #[test]
    fn truncated_chunks_embed_only_kept_text() {
        let (docs, tok) = fixture();
        let c = chunk_document(&docs[0], &tok, 2).unwrap();
        assert_eq!(c.text, "red apples");
        assert_eq!(c.tokens.len(), 2);
    }

    #[test]
    fn save_load_round_trip_and_validation() {
        let (docs, tok) = fixture();
        let mut idx = index_of(&docs, &tok);
        idx.dedup_exact();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        idx.save(&path).unwrap();
        let loaded = RetrievalIndex::load(&path, &HashedTfEmbedder::new(256), &tok).unwrap();
        assert_eq!(loaded.entries(), idx.entries());
        assert!(matches!(
            RetrievalIndex::load(&path, &HashedTfEmbedder::new(128), &tok),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dedup_removes_exact_copies() {
        let (mut docs, tok) = fixture();
        docs.push(doc("d", "blue whales swim in oceans"));
        let mut idx = index_of(&docs, &tok);
        assert_eq!(idx.dedup_exact(), 1);
        assert_eq!(idx.len(), 3);
    }
}
