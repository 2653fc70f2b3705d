//! Synthetic corpora with known dependencies.
//!
//! Every root document is low-entropy filler (a short repeating word cycle)
//! with one `key{i} val{i}` pair in the middle. `key{i}` occurs nowhere
//! else in the roots, so a bigram model trained on them is nearly uniform
//! after it and the position of `val{i}` is a high-entropy anchor. The
//! retrieval corpus holds one planted context per root that repeats the
//! `key{i} val{i}` bigram many times, plus distractors that share no words
//! with the anchors' neighbourhoods.
#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use entropylong::pipeline::{EmbedderSpec, HashedSpec, NGramSpec, PipelineConfig, ScorerSpec};
use entropylong::Strategy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FILLER: [&str; 8] = ["fa", "fb", "fc", "fd", "fe", "ff", "fg", "fh"];
pub const ROOT_LEN: usize = 120;
pub const KEY_POS: usize = 60;
pub const REPEATS: usize = 20;

pub struct Planted {
    pub dir: tempfile::TempDir,
    pub source: PathBuf,
    pub retrieval: PathBuf,
    pub roots: Vec<PlantedRoot>,
}

#[derive(Debug, Clone)]
pub struct PlantedRoot {
    pub id: String,
    pub text: String,
    pub context_id: String,
    /// Token index of `val{i}`, the anchor the context should explain.
    pub anchor: usize,
}

fn write_jsonl(path: &Path, docs: &[(String, String, &str)]) {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).unwrap());
    for (id, text, tag) in docs {
        let line = serde_json::json!({ "id": id, "text": text, "source_tag": tag });
        writeln!(f, "{line}").unwrap();
    }
}

pub fn root_text(i: usize) -> String {
    let mut words: Vec<String> = Vec::with_capacity(ROOT_LEN);
    for t in 0..ROOT_LEN - 2 {
        if t == KEY_POS {
            words.push(format!("key{i}"));
            words.push(format!("val{i}"));
        }
        words.push(FILLER[t % FILLER.len()].to_string());
    }
    words.join(" ")
}

/// `key{i} val{i}` repeated, preceded by `noise` pairs `key{i} noise{j}`
/// that make the continuation less certain and so spread the gains.
pub fn context_text(i: usize, noise: usize) -> String {
    let mut words = Vec::new();
    for j in 0..noise {
        words.push(format!("key{i}"));
        words.push(format!("noise{j}"));
    }
    for _ in 0..REPEATS {
        words.push(format!("key{i}"));
        words.push(format!("val{i}"));
    }
    words.join(" ")
}

pub fn noise_for(i: usize) -> usize {
    i % 7
}

pub fn planted_corpus(n_roots: usize, n_distractors: usize, seed: u64) -> Planted {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("roots.jsonl");
    let retrieval = dir.path().join("retrieval.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut roots = Vec::with_capacity(n_roots);
    let mut source_docs = Vec::with_capacity(n_roots);
    let mut retrieval_docs = Vec::new();
    for i in 0..n_roots {
        let id = format!("root-{i:04}");
        let context_id = format!("pctx-{i:04}");
        let text = root_text(i);
        source_docs.push((id.clone(), text.clone(), "planted-root"));
        retrieval_docs.push((context_id.clone(), context_text(i, noise_for(i)), "planted-context"));
        roots.push(PlantedRoot {
            id,
            text,
            context_id,
            anchor: KEY_POS + 1,
        });
    }
    for j in 0..n_distractors {
        let len = rng.random_range(30..80);
        let words: Vec<String> = (0..len)
            .map(|_| format!("z{}", rng.random_range(0..400)))
            .collect();
        retrieval_docs.push((format!("dis-{j:04}"), words.join(" "), "distractor"));
    }
    // a few distractors made of the roots' own filler words, shuffled
    for j in 0..3 {
        let mut words: Vec<&str> = FILLER.iter().cycle().take(64).copied().collect();
        words.shuffle(&mut rng);
        retrieval_docs.push((format!("dis-filler-{j}"), words.join(" "), "distractor"));
    }
    retrieval_docs.shuffle(&mut rng);

    write_jsonl(&source, &source_docs);
    write_jsonl(&retrieval, &retrieval_docs);
    Planted {
        dir,
        source,
        retrieval,
        roots,
    }
}

impl Planted {
    pub fn config(&self, name: &str) -> PipelineConfig {
        PipelineConfig {
            source_corpus: self.source.clone(),
            retrieval_corpus: Some(self.retrieval.clone()),
            output: self.dir.path().join(format!("{name}.samples.jsonl")),
            stats_output: Some(self.dir.path().join(format!("{name}.stats.json"))),
            alpha: 1.0,
            epsilon: 0.4,
            window: 16,
            top_k: 8,
            target_len: 4096,
            strategy: Strategy::Shuffle,
            min_tokens: 64,
            seed: 7,
            workers: 1,
            scorer: ScorerSpec::Ngram(NGramSpec {
                order: 2,
                smoothing_k: 1.0,
                cache_weight: 0.9,
                max_context: None,
            }),
            embedder: EmbedderSpec::Hashed(HashedSpec { dim: 4096 }),
            ..PipelineConfig::default()
        }
    }
}
