//! Next-token distributions and per-position predictive entropy.

mod ngram;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ngram::{train_ngram, NGramConfig, NGramModel, NGramScorer};
pub use remote::{RemoteScorer, ScorerInfo};

/// Tolerance on the probability mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("no training data")]
    NoTrainingData,
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("smoothing constant must be positive and finite, got {0}")]
    InvalidSmoothing(f64),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfVocabulary { token: u32, vocab_size: usize },
    #[error("prefix of {len} tokens exceeds scorer context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("scorer at {endpoint} unavailable after {attempts} attempts: {last_error}")]
    ScorerUnavailable {
        endpoint: String,
        attempts: u32,
        last_error: String,
    },
    #[error("scorer protocol error: {0}")]
    Protocol(String),
    #[error("at position {position}: {source}")]
    AtPosition {
        position: usize,
        #[source]
        source: Box<ScoringError>,
    },
}

impl ScoringError {
    pub fn at(self, position: usize) -> Self {
        match self {
            e @ ScoringError::AtPosition { .. } => e,
            e => ScoringError::AtPosition {
                position,
                source: Box::new(e),
            },
        }
    }

    /// Infrastructure failure, as opposed to a problem with one input.
    pub fn is_systemic(&self) -> bool {
        match self {
            ScoringError::ScorerUnavailable { .. } => true,
            ScoringError::AtPosition { source, .. } => source.is_systemic(),
            _ => false,
        }
    }
}

/// `P(v | prefix)` over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, ScoringError> {
        check_distribution(&probs)?;
        Ok(NextTokenDistribution { probs })
    }

    /// Rescales non-negative weights to unit mass, e.g. a top-p truncated
    /// distribution received from a remote scorer.
    pub fn renormalized(mut weights: Vec<f64>) -> Result<Self, ScoringError> {
        if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ScoringError::InvalidDistribution(
                "negative or non-finite weight".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(ScoringError::InvalidDistribution("zero mass".into()));
        }
        weights.iter_mut().for_each(|p| *p /= total);
        Ok(NextTokenDistribution { probs: weights })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.probs)
    }
}

fn check_distribution(probs: &[f64]) -> Result<(), ScoringError> {
    if probs.is_empty() {
        return Err(ScoringError::InvalidDistribution("empty".into()));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(ScoringError::InvalidDistribution(format!(
            "entry {p} is not a probability"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(ScoringError::InvalidDistribution(format!(
            "mass sums to {total}"
        )));
    }
    Ok(())
}

fn entropy_unchecked(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // -0.0 and tiny negative rounding for one-hot inputs
    h.max(0.0)
}

/// Entropy in nats of a raw probability vector, `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64, ScoringError> {
    check_distribution(probs)?;
    Ok(entropy_unchecked(probs))
}

/// Counters a scorer accumulates across calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerStats {
    /// Responses computed on a renormalized truncated support.
    pub truncated_responses: u64,
}

/// Provider of next-token distributions.
///
/// Implementations are immutable after construction and answer the same
/// prefix with the same result.
pub trait Scorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Longest prefix the scorer accepts.
    fn max_context(&self) -> usize;

    fn next_token_distribution(&self, prefix: &[u32])
        -> Result<NextTokenDistribution, ScoringError>;

    /// Entropy of the distribution following `prefix`.
    fn entropy_after(&self, prefix: &[u32]) -> Result<f64, ScoringError> {
        Ok(self.next_token_distribution(prefix)?.entropy())
    }

    /// Entropy at each requested position of `tokens`, i.e. of the
    /// distribution over `tokens[p]` given `tokens[..p]`.
    fn entropies(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<f64>, ScoringError> {
        positions
            .iter()
            .map(|&p| {
                if p >= tokens.len() {
                    return Err(ScoringError::PositionOutOfRange {
                        position: p,
                        len: tokens.len(),
                    });
                }
                self.entropy_after(&tokens[..p]).map_err(|e| e.at(p))
            })
            .collect()
    }

    fn stats(&self) -> ScorerStats {
        ScorerStats::default()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn max_context(&self) -> usize {
        (**self).max_context()
    }
    fn next_token_distribution(
        &self,
        prefix: &[u32],
    ) -> Result<NextTokenDistribution, ScoringError> {
        (**self).next_token_distribution(prefix)
    }
    fn entropy_after(&self, prefix: &[u32]) -> Result<f64, ScoringError> {
        (**self).entropy_after(prefix)
    }
    fn entropies(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<f64>, ScoringError> {
        (**self).entropies(tokens, positions)
    }
    fn stats(&self) -> ScorerStats {
        (**self).stats()
    }
}

/// Per-position entropies of one document with their population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub doc_id: String,
    pub entropies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EntropyProfile {
    pub fn new(doc_id: impl Into<String>, entropies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&entropies);
        EntropyProfile {
            doc_id: doc_id.into(),
            entropies,
            mean,
            std,
        }
    }

    pub fn len(&self) -> usize {
        self.entropies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropies.is_empty()
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn profile_document(
    scorer: &dyn Scorer,
    seq: &crate::corpus::TokenSequence,
) -> Result<EntropyProfile, ScoringError> {
    if seq.is_empty() {
        return Err(ScoringError::PositionOutOfRange {
            position: 0,
            len: 0,
        });
    }
    let positions: Vec<usize> = (0..seq.len()).collect();
    let entropies = scorer.entropies(&seq.tokens, &positions)?;
    Ok(EntropyProfile::new(seq.doc_id.clone(), entropies))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_is_zero() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_is_ln_v() {
        let h = entropy(&[0.25; 4]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!((h - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn skewed_pair() {
        let h = entropy(&[0.75, 0.25]).unwrap();
        let direct = -(0.75f64 * 0.75f64.ln() + 0.25f64 * 0.25f64.ln());
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn bad_mass_is_rejected() {
        assert!(matches!(
            entropy(&[0.5, 0.4]),
            Err(ScoringError::InvalidDistribution(_))
        ));
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(NextTokenDistribution::renormalized(vec![0.0, 0.0]).is_err());
        let d = NextTokenDistribution::renormalized(vec![3.0, 1.0]).unwrap();
        assert_eq!(d.probs(), &[0.75, 0.25]);
    }

    #[test]
    fn profile_statistics() {
        let p = EntropyProfile::new("d", vec![0.7]);
        assert_eq!((p.mean, p.std), (0.7, 0.0));
        let p = EntropyProfile::new("d", vec![1.2; 9]);
        assert!((p.mean - 1.2).abs() < 1e-12);
        assert!(p.std.abs() < 1e-12);
        let p = EntropyProfile::new("d", vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(p.mean, 3.0);
        assert!((p.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn errors_carry_position() {
        let e = ScoringError::ContextOverflow { len: 9, max: 4 }.at(9).at(3);
        match e {
            ScoringError::AtPosition { position, .. } => assert_eq!(position, 9),
            other => panic!("{other:?}"),
        }
    }
}
