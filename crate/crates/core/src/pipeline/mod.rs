//! End-to-end construction over a corpus, configuration, statistics, and
//! parameter sweeps.

mod config;
mod run;
mod stats;
mod sweep;

use std::path::PathBuf;

use thiserror::Error;

use crate::assembly::AssemblyError;
use crate::corpus::CorpusError;
use crate::retrieval::RetrievalError;
use crate::scoring::ScoringError;
use crate::selection::SelectionError;
use crate::verification::VerificationError;

pub use config::{ConfigError, EmbedderSpec, HashedSpec, NGramSpec, PipelineConfig, ScorerSpec};
pub use run::{build_index_file, index_chunks, run_pipeline, IndexBuildReport, Pipeline, ProfileSummary};
pub use stats::{
    compute_stats, gain_histogram, summarize_samples, DatasetStats, DocOutcome, HistogramBin, SampleSummary,
    StageTimings, HISTOGRAM_BINS,
};
pub use sweep::{render_table, run_sweep, SweepGrid, SweepRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Whether the whole run must stop, as opposed to skipping one document.
    pub fn is_systemic(&self) -> bool {
        match self {
            PipelineError::Config(_) | PipelineError::Setup(_) | PipelineError::Io { .. } => true,
            PipelineError::Corpus(e) => e.is_systemic(),
            PipelineError::Scoring(e) => e.is_systemic(),
            PipelineError::Retrieval(e) => e.is_systemic(),
            PipelineError::Verification(e) => e.is_systemic(),
            PipelineError::Selection(_) | PipelineError::Assembly(_) => false,
        }
    }

    /// Label recorded for a document skipped because of this error.
    pub fn skip_reason(&self) -> &'static str {
        match self {
            PipelineError::Corpus(_) => "tokenize_error",
            PipelineError::Scoring(_) => "scoring_error",
            PipelineError::Selection(_) => "selection_error",
            PipelineError::Retrieval(_) => "retrieval_error",
            PipelineError::Verification(_) => "verification_error",
            PipelineError::Assembly(_) => "assembly_error",
            _ => "error",
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}
