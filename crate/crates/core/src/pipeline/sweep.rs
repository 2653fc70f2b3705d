use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ConfigError;
use super::run::{settle, DocResult, Knobs, Pipeline, Retrieved};
use super::stats::{compute_stats, DatasetStats, DocOutcome, StageTimings};
use super::PipelineError;

/// Values to try for each swept knob. An empty axis means "the config's
/// value only".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub window: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            alpha: vec![1.5, 2.0, 2.5],
            epsilon: vec![0.2, 0.4, 0.6, 0.8],
            window: vec![2, 4, 8, 16],
        }
    }
}

impl SweepGrid {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let grid: SweepGrid = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, message: String| Err(ConfigError::Invalid { key, message });
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return bad("grid.alpha", format!("{a} is not a finite value >= 0"));
        }
        if let Some(e) = self.epsilon.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return bad("grid.epsilon", format!("{e} is outside (0, 1]"));
        }
        if self.window.contains(&0) {
            return bad("grid.window", "window must be at least 1".into());
        }
        Ok(())
    }
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub epsilon: f64,
    pub window: usize,
    pub stats: DatasetStats,
}

fn axis<T: Copy>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

enum Retrieval {
    Done(DocOutcome),
    Ready(DocOutcome, Retrieved),
}

/// Runs every grid cell over one prepared pipeline. Entropy profiles are
/// computed once, retrieval once per `(alpha, window)`, and verification
/// once per cell. No samples are written.
pub fn run_sweep(pipeline: &Pipeline, grid: &SweepGrid) -> Result<Vec<SweepRow>, PipelineError> {
    grid.validate()?;
    let config = pipeline.config();
    let roots = pipeline.roots();
    let exec = pipeline.executor();
    let profiles = pipeline.profile_roots()?;
    let indices: Vec<usize> = (0..roots.len()).collect();
    let mut rows = Vec::new();

    for alpha in axis(&grid.alpha, config.alpha) {
        for window in axis(&grid.window, config.window) {
            let knobs = Knobs {
                alpha,
                epsilon: config.epsilon,
                window,
                top_k: config.top_k,
            };
            let retrieved = exec.map(&indices, |&i| -> Result<Retrieval, PipelineError> {
                let root = &roots[i];
                let id = &root.doc.id;
                let (seq, profile) = match (&root.seq, &profiles[i]) {
                    (Err(reason), _) => return Ok(Retrieval::Done(DocOutcome::skipped(id, *reason))),
                    (Ok(seq), Some(Ok(p))) => (seq, p),
                    (Ok(_), Some(Err(e))) => {
                        return Ok(Retrieval::Done(DocOutcome::skipped(id, e.skip_reason())))
                    }
                    (Ok(_), None) => unreachable!("usable roots are always profiled"),
                };
                let mut outcome = DocOutcome::new(id);
                let mut timings = StageTimings::default();
                match pipeline.retrieve(root, seq, profile, &knobs, &mut outcome, &mut timings) {
                    Ok(r) => Ok(Retrieval::Ready(outcome, r)),
                    Err(e) => settle(id, Err(e)).map(|r| Retrieval::Done(r.outcome)),
                }
            });
            let retrieved = retrieved.into_iter().collect::<Result<Vec<_>, _>>()?;

            for epsilon in axis(&grid.epsilon, config.epsilon) {
                let outcomes = exec.map(&indices, |&i| -> Result<DocOutcome, PipelineError> {
                    let (outcome, r) = match &retrieved[i] {
                        Retrieval::Done(o) => return Ok(o.clone()),
                        Retrieval::Ready(o, r) => (o, r),
                    };
                    let seq = roots[i].seq.as_ref().expect("ready roots have tokens");
                    let result: Result<DocResult, _> =
                        pipeline.finish(seq, r, epsilon, outcome.clone(), StageTimings::default());
                    settle(&roots[i].doc.id, result).map(|r| r.outcome)
                });
                let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
                let mut stats = compute_stats(&outcomes);
                stats.records_malformed = pipeline.records_malformed();
                log::info!(
                    "alpha={alpha} window={window} epsilon={epsilon}: {} verified, {} samples",
                    stats.dependencies_verified,
                    stats.samples_emitted
                );
                rows.push(SweepRow {
                    alpha,
                    epsilon,
                    window,
                    stats,
                });
            }
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text comparison table, one line per grid cell.
pub fn render_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| alpha | window | epsilon | positions | per doc | evaluated | verified | samples | mean gain |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
    for r in rows {
        let s = &r.stats;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.alpha,
            r.window,
            r.epsilon,
            s.positions_selected,
            opt(s.positions_per_doc),
            s.candidates_evaluated,
            s.dependencies_verified,
            s.samples_emitted,
            opt(s.mean_gain)
        );
    }
    out
}
