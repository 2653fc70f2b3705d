use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use entropylong::corpus::{read_samples, CorpusError};
use entropylong::pipeline::{
    build_index_file, render_table, run_sweep, summarize_samples, ConfigError, EmbedderSpec, Pipeline,
    PipelineConfig, PipelineError, ScorerSpec, SweepGrid,
};
use entropylong::Strategy;
use thiserror::Error;

/// Builds long-context training samples by prepending retrieved documents
/// that measurably lower a language model's uncertainty.
#[derive(Debug, Parser)]
#[command(name = "entropylong", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk and embed a retrieval corpus and save the index.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// hashed[:DIM] or remote:URL
        #[arg(long, default_value = "hashed:4096")]
        embedder: String,
        /// Tokens kept per chunk.
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
    },
    /// Per-document entropy statistics, one JSON line per document.
    Profile {
        #[arg(long)]
        corpus: PathBuf,
        /// ngram[:order=N,k=K,cache=W,max_context=M] or remote:URL
        #[arg(long, default_value = "ngram")]
        scorer: String,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        min_tokens: Option<usize>,
        /// 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full construction described by a config file.
    Construct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        /// shuffle or sequence
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        target_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        stats_output: Option<PathBuf>,
    },
    /// Evaluate a grid of (alpha, epsilon, window) without writing samples.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Also write every row with full statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an emitted sample file.
    Stats { samples: PathBuf },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(e) => e.exit_code() as u8,
            CliError::Corpus(_) | CliError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Opens `path` for writing, or stdout when there is none.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let mut out = io::stdout().lock();
    writeln!(out, "{text}").map_err(io_err(Path::new("<stdout>")))
}

fn build_index(corpus: &Path, out: &Path, embedder: &str, max_tokens: usize) -> Result<(), CliError> {
    let embedder: EmbedderSpec = embedder.parse()?;
    let report = build_index_file(corpus, out, &embedder, max_tokens)?;
    log::info!("wrote {} entries to {}", report.entries, out.display());
    print_json(&report)
}

#[allow(clippy::too_many_arguments)]
fn profile(
    corpus: PathBuf,
    scorer: &str,
    alpha: f64,
    limit: Option<usize>,
    min_tokens: Option<usize>,
    workers: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut config = PipelineConfig {
        source_corpus: corpus,
        retrieval_corpus: None,
        scorer: scorer.parse::<ScorerSpec>()?,
        alpha,
        limit,
        workers,
        ..PipelineConfig::default()
    };
    if let Some(m) = min_tokens {
        config.min_tokens = m;
    }
    let pipeline = Pipeline::prepare(config)?;
    let summaries = pipeline.profile_summaries(alpha)?;
    let mut w = sink(out)?;
    let target = out.unwrap_or(Path::new("<stdout>"));
    for s in &summaries {
        let line = serde_json::to_string(s).expect("serializable");
        writeln!(w, "{line}").map_err(io_err(target))?;
    }
    w.flush().map_err(io_err(target))?;
    let profiled = summaries.iter().filter(|s| s.skip_reason.is_none()).count();
    let selected: usize = summaries.iter().map(|s| s.positions_selected).sum();
    log::info!(
        "profiled {profiled} of {} documents; {selected} positions selected at alpha {alpha}",
        summaries.len()
    );
    Ok(())
}

struct Overrides {
    alpha: Option<f64>,
    epsilon: Option<f64>,
    window: Option<usize>,
    top_k: Option<usize>,
    strategy: Option<Strategy>,
    target_len: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    output: Option<PathBuf>,
    stats_output: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, c: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field {
                    c.$field = v;
                })*
            };
        }
        set!(alpha, epsilon, window, top_k, strategy, target_len, seed, workers, output);
        if self.stats_output.is_some() {
            c.stats_output = self.stats_output;
        }
    }
}

fn construct(path: &Path, overrides: Overrides) -> Result<(), CliError> {
    let mut config = PipelineConfig::from_file(path)?;
    overrides.apply(&mut config);
    let output = config.output.clone();
    let stats = Pipeline::prepare(config)?.run()?;
    log::info!(
        "{} samples, {} dependencies, written to {}",
        stats.samples_emitted,
        stats.dependencies_emitted,
        output.display()
    );
    print_json(&stats)
}

fn sweep(config: &Path, grid: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = PipelineConfig::from_file(config)?;
    let grid = SweepGrid::from_file(grid)?;
    let pipeline = Pipeline::prepare(config)?;
    let rows = run_sweep(&pipeline, &grid)?;
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&rows).expect("serializable");
        std::fs::write(path, text + "\n").map_err(io_err(path))?;
    }
    print!("{}", render_table(&rows));
    Ok(())
}

fn stats(path: &Path) -> Result<(), CliError> {
    let samples = read_samples(path)?;
    print_json(&summarize_samples(&samples))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildIndex {
            corpus,
            out,
            embedder,
            max_tokens,
        } => build_index(&corpus, &out, &embedder, max_tokens),
        Command::Profile {
            corpus,
            scorer,
            alpha,
            limit,
            min_tokens,
            workers,
            out,
        } => profile(corpus, &scorer, alpha, limit, min_tokens, workers, out.as_deref()),
        Command::Construct {
            config,
            alpha,
            epsilon,
            window,
            top_k,
            strategy,
            target_len,
            seed,
            workers,
            output,
            stats_output,
        } => construct(
            &config,
            Overrides {
                alpha,
                epsilon,
                window,
                top_k,
                strategy,
                target_len,
                seed,
                workers,
                output,
                stats_output,
            },
        ),
        Command::Sweep { config, grid, out } => sweep(&config, &grid, out.as_deref()),
        Command::Stats { samples } => stats(&samples),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ENTROPYLONG_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
