use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{EmbedderSpec, PipelineConfig, ScorerSpec};
use super::stats::{compute_stats, DatasetStats, DocOutcome, StageTimings};
use super::PipelineError;
use crate::assembly::{assemble_sample, pack_samples, AssemblyConfig, AssemblyError, TrainingSample};
use crate::corpus::{
    read_corpus, tokenize_document, CorpusError, Document, RemoteTokenizer, SampleWriter, TokenSequence,
    Tokenizer, WordTokenizer,
};
use crate::exec::Executor;
use crate::retrieval::{
    build_index, chunk_document, extract_query, Candidate, Embedder, HashedTfEmbedder, RemoteEmbedder,
    RetrievalError, RetrievalIndex,
};
use crate::scoring::{
    profile_document, train_ngram, EntropyProfile, NGramConfig, NGramScorer, RemoteScorer, Scorer,
};
use crate::selection::select_anchors;
use crate::verification::{joint_gain, verify_candidates_for_position, CandidateOutcome};

/// Documents handed to the worker pool at a time; results are written in
/// input order after each batch.
const BATCH_DOCS: usize = 256;

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// A source document and, if it is usable as a root, its tokens.
pub(crate) struct Root {
    pub doc: Document,
    pub seq: Result<TokenSequence, &'static str>,
}

/// Parameters that vary between construction runs over one prepared corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Knobs {
    pub alpha: f64,
    pub epsilon: f64,
    pub window: usize,
    pub top_k: usize,
}

impl Knobs {
    fn of(config: &PipelineConfig) -> Self {
        Knobs {
            alpha: config.alpha,
            epsilon: config.epsilon,
            window: config.window,
            top_k: config.top_k,
        }
    }
}

/// Anchors of one root with their retrieved candidates, ascending anchor.
pub(crate) type Retrieved = Vec<(usize, Vec<Candidate>)>;

pub(crate) struct DocResult {
    pub outcome: DocOutcome,
    pub sample: Option<TrainingSample>,
    pub timings: StageTimings,
}

/// Everything that is shared by all documents of a run: corpora, tokenizer,
/// scorer, embedder, and the retrieval index.
pub struct Pipeline {
    config: PipelineConfig,
    tokenizer: Box<dyn Tokenizer>,
    scorer: Box<dyn Scorer>,
    embedder: Box<dyn Embedder>,
    separator: u32,
    index: RetrievalIndex,
    roots: Vec<Root>,
    records_malformed: usize,
    executor: Executor,
    timings: StageTimings,
}

impl Pipeline {
    /// Validates the config, reads both corpora, fits the tokenizer, trains
    /// or connects the scorer, and builds (or loads) the index.
    pub fn prepare(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut timings = StageTimings::default();

        let started = Instant::now();
        let (source_docs, source_errors) = read_corpus(&config.source_corpus, config.limit)?;
        log::info!(
            "read {} source documents from {} ({} malformed records)",
            source_docs.len(),
            config.source_corpus.display(),
            source_errors.len()
        );
        if source_docs.is_empty() {
            return Err(PipelineError::Setup(format!(
                "no usable documents in {}",
                config.source_corpus.display()
            )));
        }
        let embedder = make_embedder(&config.embedder)?;
        let mut records_malformed = source_errors.len();
        let (retrieval_docs, prebuilt) = match &config.index {
            Some(path) => {
                let index = RetrievalIndex::load_untokenized(path, embedder.as_ref())?;
                log::info!("loaded index of {} entries from {}", index.len(), path.display());
                (Vec::new(), Some(index))
            }
            None if config.retrieval_corpus.is_none() => (source_docs.clone(), None),
            None => {
                let (docs, errors) = read_corpus(config.retrieval_path(), None)?;
                records_malformed += errors.len();
                log::info!(
                    "read {} retrieval documents from {}",
                    docs.len(),
                    config.retrieval_path().display()
                );
                (docs, None)
            }
        };
        timings.ingest_ms = ms(started);

        let started = Instant::now();
        let tokenizer: Box<dyn Tokenizer> = match &config.scorer {
            ScorerSpec::Ngram(_) => {
                let retrieval_texts: Vec<&str> = match &prebuilt {
                    Some(index) => index.entries().iter().map(|e| e.text.as_str()).collect(),
                    None => retrieval_docs.iter().map(|d| d.text.as_str()).collect(),
                };
                let texts = source_docs
                    .iter()
                    .map(|d| d.text.as_str())
                    .chain(retrieval_texts.iter().copied());
                Box::new(WordTokenizer::fit(texts))
            }
            ScorerSpec::Remote(remote) => Box::new(RemoteTokenizer::connect(remote)?),
        };
        let separator = tokenizer
            .separator()
            .ok_or_else(|| PipelineError::Setup("tokenizer declares no separator token".into()))?;

        let executor = Executor::new(config.workers);
        let roots = tokenize_roots(&executor, source_docs, tokenizer.as_ref(), &config)?;
        let scorer: Box<dyn Scorer> = match &config.scorer {
            ScorerSpec::Ngram(spec) => {
                let ngram = NGramConfig::new(spec.order, spec.smoothing_k, tokenizer.vocab_size())
                    .with_boundary(separator);
                let model = train_ngram(
                    roots.iter().filter_map(|r| r.seq.as_ref().ok()).map(|s| &s.tokens),
                    &ngram,
                )?;
                Box::new(
                    NGramScorer::new(model)
                        .with_cache_weight(spec.cache_weight)
                        .with_max_context(spec.max_context.unwrap_or(usize::MAX)),
                )
            }
            ScorerSpec::Remote(remote) => {
                let scorer = RemoteScorer::connect(remote)?;
                if scorer.vocab_size() != tokenizer.vocab_size() {
                    return Err(PipelineError::Setup(format!(
                        "scorer vocabulary {} differs from tokenizer vocabulary {}",
                        scorer.vocab_size(),
                        tokenizer.vocab_size()
                    )));
                }
                Box::new(scorer)
            }
        };
        timings.train_ms = ms(started);

        let started = Instant::now();
        let mut index = match prebuilt {
            Some(mut index) => {
                index.retokenize(tokenizer.as_ref(), config.max_context_tokens)?;
                index
            }
            None => {
                let chunks = index_chunks(&retrieval_docs, tokenizer.as_ref(), config.max_context_tokens)?;
                build_index(chunks, embedder.as_ref())?
            }
        };
        if config.dedup_retrieval {
            let removed = index.dedup_exact();
            log::info!("removed {removed} duplicate retrieval chunks");
        }
        timings.index_ms = ms(started);
        log::info!(
            "prepared {} roots, index of {} chunks, vocabulary {}",
            roots.len(),
            index.len(),
            tokenizer.vocab_size()
        );

        Ok(Pipeline {
            config,
            tokenizer,
            scorer,
            embedder,
            separator,
            index,
            roots,
            records_malformed,
            executor,
            timings,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn scorer(&self) -> &dyn Scorer {
        self.scorer.as_ref()
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn separator(&self) -> u32 {
        self.separator
    }

    pub(crate) fn roots(&self) -> &[Root] {
        &self.roots
    }

    pub(crate) fn executor(&self) -> &Executor {
        &self.executor
    }

    pub(crate) fn records_malformed(&self) -> usize {
        self.records_malformed
    }

    /// Entropy profile of every usable root, in corpus order. Systemic
    /// scorer failures abort; other failures are returned per document.
    pub(crate) fn profile_roots(
        &self,
    ) -> Result<Vec<Option<Result<EntropyProfile, PipelineError>>>, PipelineError> {
        let profiles = self.executor.map(&self.roots, |root| {
            root.seq
                .as_ref()
                .ok()
                .map(|seq| profile_document(self.scorer.as_ref(), seq).map_err(PipelineError::from))
        });
        let mut out = Vec::with_capacity(profiles.len());
        for p in profiles {
            match p {
                Some(Err(e)) if e.is_systemic() => return Err(e),
                other => out.push(other),
            }
        }
        Ok(out)
    }

    /// Per-document entropy statistics at selectivity `alpha`, without
    /// retrieval or verification.
    pub fn profile_summaries(&self, alpha: f64) -> Result<Vec<ProfileSummary>, PipelineError> {
        let profiles = self.profile_roots()?;
        let mut out = Vec::with_capacity(profiles.len());
        for (root, profile) in self.roots.iter().zip(profiles) {
            let mut summary = ProfileSummary {
                doc_id: root.doc.id.clone(),
                tokens: root.seq.as_ref().map_or(0, |s| s.len()),
                skip_reason: None,
                mean: None,
                std: None,
                max: None,
                threshold: None,
                positions_above_threshold: 0,
                positions_selected: 0,
            };
            match (&root.seq, profile) {
                (Err(reason), _) => summary.skip_reason = Some(reason.to_string()),
                (Ok(_), Some(Err(e))) => summary.skip_reason = Some(e.skip_reason().to_string()),
                (Ok(_), Some(Ok(p))) => {
                    let set = select_anchors(&p, alpha, self.config.max_positions_per_doc)?;
                    summary.mean = Some(p.mean);
                    summary.std = Some(p.std);
                    summary.max = p.entropies.iter().copied().reduce(f64::max);
                    summary.threshold = Some(set.threshold);
                    summary.positions_above_threshold = set.uncapped_len;
                    summary.positions_selected = set.len();
                }
                (Ok(_), None) => unreachable!("usable roots are always profiled"),
            }
            out.push(summary);
        }
        Ok(out)
    }

    /// Runs every root through selection, retrieval, verification and
    /// assembly, writing samples (and optionally packed bins and stats).
    pub fn run(&self) -> Result<DatasetStats, PipelineError> {
        let started = Instant::now();
        let knobs = Knobs::of(&self.config);
        let mut writer = SampleWriter::create(&self.config.output)?;
        let mut outcomes = Vec::with_capacity(self.roots.len());
        let mut timings = self.timings.clone();
        let mut kept = Vec::new();

        for (b, batch) in self.roots.chunks(BATCH_DOCS).enumerate() {
            let results = self.executor.map(batch, |root| self.process_root(root, &knobs));
            let write_started = Instant::now();
            for result in results {
                let result = result?;
                timings.add(&result.timings);
                if let Some(sample) = result.sample {
                    writer.write(&sample)?;
                    if self.config.packed_output.is_some() {
                        kept.push(sample);
                    }
                }
                outcomes.push(result.outcome);
            }
            timings.write_ms += ms(write_started);
            log::debug!("finished batch {} ({} documents so far)", b + 1, outcomes.len());
        }
        let written = writer.finish()?;

        let mut stats = compute_stats(&outcomes);
        debug_assert_eq!(written, stats.samples_emitted);
        stats.records_malformed = self.records_malformed;
        stats.truncated_scorer_responses = self.scorer.stats().truncated_responses;

        if let Some(path) = &self.config.packed_output {
            let write_started = Instant::now();
            let bins = pack_samples(&kept, self.config.target_len, self.separator);
            write_packed(path, &bins, &kept)?;
            stats.packed_bins = Some(bins.len());
            timings.write_ms += ms(write_started);
        }

        timings.total_ms = timings.ingest_ms + timings.train_ms + timings.index_ms + ms(started);
        stats.timings = timings;
        stats.config = Some(self.config.clone());
        if let Some(path) = &self.config.stats_output {
            write_json(path, &stats)?;
        }
        log::info!(
            "emitted {} samples from {} documents ({} skipped), mean gain {}",
            stats.samples_emitted,
            stats.docs_in,
            stats.docs_skipped,
            stats
                .mean_gain
                .map_or_else(|| "n/a".to_string(), |g| format!("{g:.4}"))
        );
        Ok(stats)
    }

    fn process_root(&self, root: &Root, knobs: &Knobs) -> Result<DocResult, PipelineError> {
        let seq = match &root.seq {
            Ok(seq) => seq,
            Err(reason) => return Ok(skipped(DocOutcome::skipped(&root.doc.id, *reason))),
        };
        let mut timings = StageTimings::default();
        let started = Instant::now();
        let profile = profile_document(self.scorer.as_ref(), seq);
        timings.profile_ms = ms(started);
        let result = profile
            .map_err(PipelineError::from)
            .and_then(|p| self.construct_from_profile(root, seq, &p, knobs));
        settle(&root.doc.id, result).map(|mut r| {
            r.timings.add(&timings);
            r
        })
    }

    /// Everything after profiling, for one root.
    pub(crate) fn construct_from_profile(
        &self,
        root: &Root,
        seq: &TokenSequence,
        profile: &EntropyProfile,
        knobs: &Knobs,
    ) -> Result<DocResult, PipelineError> {
        let mut timings = StageTimings::default();
        let mut outcome = DocOutcome::new(&root.doc.id);
        let retrieved = self.retrieve(root, seq, profile, knobs, &mut outcome, &mut timings)?;
        self.finish(seq, &retrieved, knobs.epsilon, outcome, timings)
    }

    /// Selects anchors and retrieves candidates for each. Fills the
    /// selection and retrieval counters of `outcome`.
    pub(crate) fn retrieve(
        &self,
        root: &Root,
        seq: &TokenSequence,
        profile: &EntropyProfile,
        knobs: &Knobs,
        outcome: &mut DocOutcome,
        timings: &mut StageTimings,
    ) -> Result<Retrieved, PipelineError> {
        outcome.profiled = true;
        let started = Instant::now();
        let anchors = select_anchors(profile, knobs.alpha, self.config.max_positions_per_doc)?;
        outcome.positions_above_threshold = anchors.uncapped_len;
        outcome.positions_selected = anchors.len();
        timings.select_ms += ms(started);
        if anchors.is_empty() {
            return Ok(Vec::new());
        }

        let started = Instant::now();
        let queries = anchors
            .positions
            .iter()
            .map(|&t| extract_query(seq, &root.doc.text, t, knobs.window))
            .collect::<Result<Vec<_>, _>>()?;
        let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        if vectors.len() != queries.len() {
            return Err(RetrievalError::Protocol(format!(
                "{} query vectors for {} queries",
                vectors.len(),
                queries.len()
            ))
            .into());
        }
        let exclude: HashSet<String> = std::iter::once(root.doc.id.clone()).collect();
        let mut retrieved = Vec::with_capacity(queries.len());
        for (q, v) in queries.iter().zip(&vectors) {
            let candidates = self.index.search(v, knobs.top_k, &exclude)?;
            outcome.candidates_retrieved += candidates.len();
            retrieved.push((q.anchor, candidates));
        }
        timings.retrieve_ms += ms(started);
        Ok(retrieved)
    }

    /// Verifies retrieved candidates anchor by anchor and assembles the
    /// sample. An empty `retrieved` means no anchors were selected.
    pub(crate) fn finish(
        &self,
        seq: &TokenSequence,
        retrieved: &Retrieved,
        epsilon: f64,
        mut outcome: DocOutcome,
        mut timings: StageTimings,
    ) -> Result<DocResult, PipelineError> {
        if retrieved.is_empty() {
            outcome.skip_reason = Some("no_high_entropy_positions".into());
            return Ok(DocResult {
                outcome,
                sample: None,
                timings,
            });
        }

        let started = Instant::now();
        let mut used = HashSet::new();
        let mut verified = Vec::new();
        for (anchor, candidates) in retrieved {
            let v = verify_candidates_for_position(
                self.scorer.as_ref(),
                &seq.tokens,
                *anchor,
                candidates,
                epsilon,
                &mut used,
                self.separator,
            )?;
            for e in &v.evaluations {
                match &e.outcome {
                    CandidateOutcome::AlreadyUsed => outcome.candidates_already_used += 1,
                    CandidateOutcome::Skipped(_) => outcome.candidates_skipped += 1,
                    CandidateOutcome::Measured(m) => {
                        outcome.candidates_evaluated += 1;
                        if m.truncated_tokens > 0 {
                            outcome.chunks_truncated += 1;
                        }
                    }
                }
            }
            if let Some(dep) = v.chosen {
                outcome.verified_gains.push(dep.gain);
                verified.push(dep);
            }
        }
        timings.verify_ms += ms(started);
        if verified.is_empty() {
            outcome.skip_reason = Some("no_verified_context".into());
            return Ok(DocResult {
                outcome,
                sample: None,
                timings,
            });
        }

        let started = Instant::now();
        let assembly = AssemblyConfig {
            strategy: self.config.strategy,
            target_len: self.config.target_len,
            global_seed: self.config.seed,
            separator: self.separator,
            min_deps: self.config.min_deps,
        };
        let sample = match assemble_sample(&verified, seq, &assembly) {
            Ok(sample) => sample,
            Err(AssemblyError::SampleDiscarded { .. }) => {
                outcome.skip_reason = Some("sample_discarded".into());
                timings.assemble_ms += ms(started);
                return Ok(DocResult {
                    outcome,
                    sample: None,
                    timings,
                });
            }
            Err(e) => return Err(e.into()),
        };
        outcome.emitted_gains = sample.dependencies.iter().map(|d| d.gain).collect();
        outcome.emitted_tokens = sample.total_tokens;
        if self.config.joint_gain_report {
            outcome.joint_gain = match joint_gain(
                self.scorer.as_ref(),
                &sample.tokens,
                sample.root_offset,
                &sample.dependencies,
            ) {
                Ok(g) => g,
                Err(e) if e.is_systemic() => return Err(e.into()),
                Err(e) => {
                    log::warn!("joint gain for {}: {e}", seq.doc_id);
                    None
                }
            };
        }
        timings.assemble_ms += ms(started);
        Ok(DocResult {
            outcome,
            sample: Some(sample),
            timings,
        })
    }
}

fn skipped(outcome: DocOutcome) -> DocResult {
    DocResult {
        outcome,
        sample: None,
        timings: StageTimings::default(),
    }
}

/// Turns a per-document failure into a skip; systemic failures pass through.
pub(crate) fn settle(doc_id: &str, result: Result<DocResult, PipelineError>) -> Result<DocResult, PipelineError> {
    match result {
        Ok(r) => Ok(r),
        Err(e) if e.is_systemic() => Err(e),
        Err(e) => {
            log::warn!("skipping document {doc_id}: {e}");
            let mut outcome = DocOutcome::skipped(doc_id, e.skip_reason());
            outcome.profiled = !matches!(e, PipelineError::Scoring(_));
            Ok(skipped(outcome))
        }
    }
}

fn make_embedder(spec: &EmbedderSpec) -> Result<Box<dyn Embedder>, PipelineError> {
    Ok(match spec {
        EmbedderSpec::Hashed(h) => Box::new(HashedTfEmbedder::new(h.dim)),
        EmbedderSpec::Remote(r) => Box::new(RemoteEmbedder::connect(r)?),
    })
}

fn tokenize_roots(
    executor: &Executor,
    docs: Vec<Document>,
    tokenizer: &dyn Tokenizer,
    config: &PipelineConfig,
) -> Result<Vec<Root>, PipelineError> {
    let seqs = executor.map(&docs, |doc| tokenize_document(doc, tokenizer));
    docs.into_iter()
        .zip(seqs)
        .map(|(doc, seq)| {
            let seq = match seq {
                Ok(s) if s.len() < config.min_tokens => {
                    log::debug!("{}: {} tokens, below min_tokens", doc.id, s.len());
                    Err("too_short")
                }
                Ok(s) if s.len() > config.target_len => {
                    log::debug!("{}: {} tokens, above target_len", doc.id, s.len());
                    Err("too_long")
                }
                Ok(s) => Ok(s),
                Err(CorpusError::EmptyDocument(_)) => Err("empty"),
                Err(e) if e.is_systemic() => return Err(e.into()),
                Err(e) => {
                    log::warn!("{}: {e}", doc.id);
                    Err("tokenize_error")
                }
            };
            Ok(Root { doc, seq })
        })
        .collect()
}

/// Retrieval units for `docs`; documents without tokens are skipped.
pub fn index_chunks(
    docs: &[Document],
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
) -> Result<Vec<crate::retrieval::IndexChunk>, PipelineError> {
    let mut chunks = Vec::with_capacity(docs.len());
    for doc in docs {
        match chunk_document(doc, tokenizer, max_tokens) {
            Ok(c) => chunks.push(c),
            Err(RetrievalError::EmptyText) => log::debug!("{}: no tokens to index", doc.id),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(chunks)
}

#[derive(Serialize)]
struct PackedRecord<'a> {
    members: Vec<&'a str>,
    total_tokens: usize,
    tokens: &'a [u32],
}

fn write_packed(
    path: &Path,
    bins: &[crate::assembly::PackedBin],
    samples: &[TrainingSample],
) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for bin in bins {
        let record = PackedRecord {
            members: bin
                .members
                .iter()
                .map(|&i| samples[i].root_doc_id.as_str())
                .collect(),
            total_tokens: bin.tokens.len(),
            tokens: &bin.tokens,
        };
        let line = serde_json::to_string(&record).expect("packed record serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub(crate) fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("stats serialize");
    std::fs::write(path, text + "\n").map_err(|source| PipelineError::Io {
        path: path.clone(),
        source,
    })
}

/// Entropy statistics of one document, in nats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileSummary {
    pub doc_id: String,
    pub tokens: usize,
    pub skip_reason: Option<String>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub max: Option<f64>,
    pub threshold: Option<f64>,
    pub positions_above_threshold: usize,
    pub positions_selected: usize,
}

/// Summary of a standalone index build.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexBuildReport {
    pub documents: usize,
    pub records_malformed: usize,
    pub entries: usize,
    pub dim: usize,
    pub embedder: String,
}

/// Chunks and embeds `corpus` and saves the index to `out`. Chunks are cut
/// at `max_tokens` word-level tokens; a pipeline loading the index
/// re-tokenizes the stored text with its own tokenizer.
pub fn build_index_file(
    corpus: &Path,
    out: &Path,
    embedder: &EmbedderSpec,
    max_tokens: usize,
) -> Result<IndexBuildReport, PipelineError> {
    if max_tokens == 0 {
        return Err(super::ConfigError::Invalid {
            key: "max_tokens",
            message: "must be at least 1".into(),
        }
        .into());
    }
    let (docs, errors) = read_corpus(corpus, None)?;
    if docs.is_empty() {
        return Err(PipelineError::Setup(format!("no usable documents in {}", corpus.display())));
    }
    let embedder = make_embedder(embedder)?;
    let tokenizer = WordTokenizer::fit(docs.iter().map(|d| d.text.as_str()));
    let chunks = index_chunks(&docs, &tokenizer, max_tokens)?;
    let index = build_index(chunks, embedder.as_ref())?;
    index.save(out)?;
    Ok(IndexBuildReport {
        documents: docs.len(),
        records_malformed: errors.len(),
        entries: index.len(),
        dim: index.dim(),
        embedder: index.embedder_id().to_string(),
    })
}

/// Prepares and runs a full construction pass.
pub fn run_pipeline(config: &PipelineConfig) -> Result<DatasetStats, PipelineError> {
    Pipeline::prepare(config.clone())?.run()
}
