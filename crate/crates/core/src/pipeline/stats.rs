use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::assembly::{Strategy, TrainingSample};

pub const HISTOGRAM_BINS: usize = 10;

/// What happened to one source document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocOutcome {
    pub doc_id: String,
    /// `None` when a sample was emitted.
    pub skip_reason: Option<String>,
    /// Set when the document reached entropy profiling.
    pub profiled: bool,
    pub positions_above_threshold: usize,
    pub positions_selected: usize,
    pub candidates_retrieved: usize,
    pub candidates_evaluated: usize,
    pub candidates_skipped: usize,
    pub candidates_already_used: usize,
    pub chunks_truncated: usize,
    /// Gains of every dependency that passed verification.
    pub verified_gains: Vec<f64>,
    /// Gains of the dependencies in the emitted sample.
    pub emitted_gains: Vec<f64>,
    pub emitted_tokens: usize,
    pub joint_gain: Option<f64>,
}

impl DocOutcome {
    pub fn new(doc_id: impl Into<String>) -> Self {
        DocOutcome {
            doc_id: doc_id.into(),
            ..Default::default()
        }
    }

    pub fn skipped(doc_id: impl Into<String>, reason: impl Into<String>) -> Self {
        DocOutcome {
            skip_reason: Some(reason.into()),
            ..Self::new(doc_id)
        }
    }

    pub fn emitted(&self) -> bool {
        self.skip_reason.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Counts of `values` in equal-width bins over `[0, 1]`. Values outside the
/// range land in the nearest end bin.
pub fn gain_histogram(values: &[f64]) -> Vec<HistogramBin> {
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &v in values {
        let b = (v * HISTOGRAM_BINS as f64).floor();
        let b = if b.is_nan() { 0.0 } else { b.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) };
        counts[b as usize] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            lo: i as f64 / HISTOGRAM_BINS as f64,
            hi: (i + 1) as f64 / HISTOGRAM_BINS as f64,
            count,
        })
        .collect()
}

/// Wall-clock milliseconds. Per-document stages are summed over workers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub ingest_ms: f64,
    pub train_ms: f64,
    pub index_ms: f64,
    pub profile_ms: f64,
    pub select_ms: f64,
    pub retrieve_ms: f64,
    pub verify_ms: f64,
    pub assemble_ms: f64,
    pub write_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub(crate) fn add(&mut self, other: &StageTimings) {
        self.profile_ms += other.profile_ms;
        self.select_ms += other.select_ms;
        self.retrieve_ms += other.retrieve_ms;
        self.verify_ms += other.verify_ms;
        self.assemble_ms += other.assemble_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub docs_in: usize,
    pub docs_skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
    /// Corpus lines rejected before they became documents.
    pub records_malformed: usize,
    pub docs_profiled: usize,
    /// Positions above the threshold before the per-document cap.
    pub positions_above_threshold: usize,
    /// Anchors after the cap, summed over documents.
    pub positions_selected: usize,
    /// `positions_selected` averaged over profiled documents.
    pub positions_per_doc: Option<f64>,
    pub candidates_retrieved: usize,
    pub candidates_evaluated: usize,
    pub candidates_skipped: usize,
    pub candidates_already_used: usize,
    pub chunks_truncated: usize,
    pub dependencies_verified: usize,
    /// Dependencies that survived assembly into an emitted sample.
    pub dependencies_emitted: usize,
    pub samples_emitted: usize,
    pub tokens_emitted: usize,
    /// Mean gain over emitted dependencies; `None` when there are none.
    pub mean_gain: Option<f64>,
    pub mean_verified_gain: Option<f64>,
    pub gain_histogram: Vec<HistogramBin>,
    pub mean_joint_gain: Option<f64>,
    pub joint_gain_samples: usize,
    pub truncated_scorer_responses: u64,
    pub packed_bins: Option<usize>,
    pub timings: StageTimings,
    pub config: Option<PipelineConfig>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates per-document outcomes, in the order given.
pub fn compute_stats<'a, I>(outcomes: I) -> DatasetStats
where
    I: IntoIterator<Item = &'a DocOutcome>,
{
    let outcomes: Vec<&DocOutcome> = outcomes.into_iter().collect();
    let mut skip_reasons = BTreeMap::new();
    for o in &outcomes {
        if let Some(r) = &o.skip_reason {
            *skip_reasons.entry(r.clone()).or_insert(0) += 1;
        }
    }
    let sum = |f: fn(&DocOutcome) -> usize| outcomes.iter().map(|o| f(o)).sum::<usize>();
    let emitted: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| o.emitted_gains.iter().copied())
        .collect();
    let docs_profiled = outcomes.iter().filter(|o| o.profiled).count();
    let positions_selected = sum(|o| o.positions_selected);
    let joint: Vec<f64> = outcomes.iter().filter_map(|o| o.joint_gain).collect();

    DatasetStats {
        docs_in: outcomes.len(),
        docs_skipped: outcomes.iter().filter(|o| !o.emitted()).count(),
        skip_reasons,
        records_malformed: 0,
        docs_profiled,
        positions_above_threshold: sum(|o| o.positions_above_threshold),
        positions_selected,
        positions_per_doc: (docs_profiled > 0).then(|| positions_selected as f64 / docs_profiled as f64),
        candidates_retrieved: sum(|o| o.candidates_retrieved),
        candidates_evaluated: sum(|o| o.candidates_evaluated),
        candidates_skipped: sum(|o| o.candidates_skipped),
        candidates_already_used: sum(|o| o.candidates_already_used),
        chunks_truncated: sum(|o| o.chunks_truncated),
        dependencies_verified: sum(|o| o.verified_gains.len()),
        dependencies_emitted: emitted.len(),
        samples_emitted: outcomes.iter().filter(|o| o.emitted()).count(),
        tokens_emitted: sum(|o| o.emitted_tokens),
        mean_gain: mean(emitted.iter().copied()),
        mean_verified_gain: mean(outcomes.iter().flat_map(|o| o.verified_gains.iter().copied())),
        gain_histogram: gain_histogram(&emitted),
        mean_joint_gain: mean(joint.iter().copied()),
        joint_gain_samples: joint.len(),
        truncated_scorer_responses: 0,
        packed_bins: None,
        timings: StageTimings::default(),
        config: None,
    }
}

impl DatasetStats {
    /// Same stats with timings zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> DatasetStats {
        DatasetStats {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }
}

/// Summary of an emitted sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub samples: usize,
    pub dependencies: usize,
    pub total_tokens: usize,
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub mean_tokens: Option<f64>,
    pub mean_dependencies: Option<f64>,
    pub mean_gain: Option<f64>,
    pub min_gain: Option<f64>,
    pub max_gain: Option<f64>,
    pub gain_histogram: Vec<HistogramBin>,
    pub strategies: BTreeMap<String, usize>,
}

pub fn summarize_samples(samples: &[TrainingSample]) -> SampleSummary {
    let gains: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.dependencies.iter().map(|d| d.gain))
        .collect();
    let mut strategies = BTreeMap::new();
    for s in samples {
        let name = match s.strategy {
            Strategy::Shuffle => "shuffle",
            Strategy::Sequence => "sequence",
        };
        *strategies.entry(name.to_string()).or_insert(0) += 1;
    }
    SampleSummary {
        samples: samples.len(),
        dependencies: gains.len(),
        total_tokens: samples.iter().map(|s| s.total_tokens).sum(),
        min_tokens: samples.iter().map(|s| s.total_tokens).min(),
        max_tokens: samples.iter().map(|s| s.total_tokens).max(),
        mean_tokens: mean(samples.iter().map(|s| s.total_tokens as f64)),
        mean_dependencies: mean(samples.iter().map(|s| s.dependencies.len() as f64)),
        mean_gain: mean(gains.iter().copied()),
        min_gain: gains.iter().copied().reduce(f64::min),
        max_gain: gains.iter().copied().reduce(f64::max),
        gain_histogram: gain_histogram(&gains),
        strategies,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emitted(id: &str, gains: &[f64]) -> DocOutcome {
        DocOutcome {
            profiled: true,
            positions_selected: gains.len() + 1,
            positions_above_threshold: gains.len() + 2,
            candidates_evaluated: 3 * gains.len(),
            verified_gains: gains.to_vec(),
            emitted_gains: gains.to_vec(),
            ..DocOutcome::new(id)
        }
    }

    #[test]
    fn mean_over_retained_gains() {
        let o = emitted("a", &[0.5, 0.9]);
        let s = compute_stats([&o]);
        assert!((s.mean_gain.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(s.dependencies_emitted, 2);
    }

    #[test]
    fn nothing_retained_gives_null_mean() {
        let o = DocOutcome::skipped("a", "no_verified_context");
        let s = compute_stats([&o]);
        assert_eq!(s.mean_gain, None);
        assert_eq!(s.dependencies_emitted, 0);
        let json = serde_json::to_value(&s).unwrap();
        assert!(json["mean_gain"].is_null());
    }

    #[test]
    fn counters_from_three_docs() {
        let docs = [
            emitted("a", &[0.5]),
            emitted("b", &[0.6, 0.8]),
            DocOutcome::skipped("c", "too_short"),
        ];
        let s = compute_stats(&docs);
        assert_eq!(s.docs_in, 3);
        assert_eq!(s.samples_emitted, 2);
        assert_eq!(s.docs_skipped, 1);
        assert_eq!(s.skip_reasons["too_short"], 1);
        assert_eq!(s.positions_selected, 5);
        assert_eq!(s.positions_per_doc, Some(2.5));
        assert!(s.dependencies_verified <= s.candidates_evaluated);
        assert!(s.samples_emitted <= s.docs_in);
        assert_eq!(s.gain_histogram.iter().map(|b| b.count).sum::<usize>(), 3);
        assert_eq!(s.gain_histogram[5].count, 1);
        assert_eq!(s.gain_histogram[6].count, 1);
        assert_eq!(s.gain_histogram[8].count, 1);
    }

    #[test]
    fn histogram_edges() {
        let h = gain_histogram(&[0.0, 1.0, -0.5, 0.95]);
        assert_eq!(h.len(), HISTOGRAM_BINS);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[9].count, 2);
    }
}
