//! Contextual information gain and per-anchor candidate verification.
//!
//! A candidate chunk is joined to the root document at the token level,
//! `chunk ++ [separator] ++ root`, so the token at the anchor is the same
//! token before and after the join. The gain is the relative entropy drop at
//! that token: `(H - H') / H`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::Candidate;
use crate::scoring::{Scorer, ScoringError};
use crate::selection::MIN_ANCHOR_ENTROPY;

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("anchor {anchor} outside root of {len} tokens")]
    PositionOutOfRange { anchor: usize, len: usize },
    #[error("base entropy {0} at anchor is too small to normalize by")]
    BaseEntropyTooLow(f64),
    #[error("root prefix of {needed} tokens leaves no room in scorer context of {max}")]
    VerificationSkipped { needed: usize, max: usize },
    #[error("epsilon must lie in (0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

impl VerificationError {
    pub fn is_systemic(&self) -> bool {
        matches!(self, VerificationError::Scoring(e) if e.is_systemic())
    }
}

/// Relative entropy reduction. May be negative.
pub fn relative_gain(base: f64, conditioned: f64) -> f64 {
    (base - conditioned) / base
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainMeasurement {
    pub base_entropy: f64,
    pub conditioned_entropy: f64,
    pub gain: f64,
    /// Tokens cut from the front of the chunk to fit the scorer context.
    pub truncated_tokens: usize,
}

/// A candidate that passed verification for one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedDependency {
    /// `chunk_tokens` holds the chunk exactly as verified (after any
    /// truncation).
    pub candidate: Candidate,
    pub anchor: usize,
    pub base_entropy: f64,
    pub conditioned_entropy: f64,
    pub gain: f64,
}

/// Entropy at `anchor` of the bare root document.
pub fn base_entropy(
    scorer: &dyn Scorer,
    root: &[u32],
    anchor: usize,
) -> Result<f64, VerificationError> {
    if anchor >= root.len() {
        return Err(VerificationError::PositionOutOfRange {
            anchor,
            len: root.len(),
        });
    }
    Ok(scorer.entropies(root, &[anchor])?[0])
}

/// Entropy at the anchor token with `chunk` prepended, plus the number of
/// chunk tokens dropped (from the left) to respect the scorer context.
pub fn conditioned_entropy(
    scorer: &dyn Scorer,
    root: &[u32],
    anchor: usize,
    chunk: &[u32],
    separator: u32,
) -> Result<(f64, usize), VerificationError> {
    if anchor >= root.len() {
        return Err(VerificationError::PositionOutOfRange {
            anchor,
            len: root.len(),
        });
    }
    let max = scorer.max_context();
    let fixed = anchor + 1;
    if fixed > max {
        return Err(VerificationError::VerificationSkipped { needed: fixed, max });
    }
    let keep = chunk.len().min(max - fixed);
    let kept = &chunk[chunk.len() - keep..];
    let mut joined = Vec::with_capacity(keep + 1 + anchor + 1);
    joined.extend_from_slice(kept);
    joined.push(separator);
    joined.extend_from_slice(&root[..=anchor]);
    let target = keep + 1 + anchor;
    debug_assert_eq!(joined[target], root[anchor]);
    let h = scorer.entropies(&joined, &[target])?[0];
    Ok((h, chunk.len() - keep))
}

pub fn information_gain(
    scorer: &dyn Scorer,
    root: &[u32],
    anchor: usize,
    chunk: &[u32],
    separator: u32,
) -> Result<GainMeasurement, VerificationError> {
    let base = base_entropy(scorer, root, anchor)?;
    gain_against_base(scorer, root, anchor, chunk, separator, base)
}

fn gain_against_base(
    scorer: &dyn Scorer,
    root: &[u32],
    anchor: usize,
    chunk: &[u32],
    separator: u32,
    base: f64,
) -> Result<GainMeasurement, VerificationError> {
    if base <= MIN_ANCHOR_ENTROPY {
        return Err(VerificationError::BaseEntropyTooLow(base));
    }
    let (conditioned, truncated_tokens) =
        conditioned_entropy(scorer, root, anchor, chunk, separator)?;
    Ok(GainMeasurement {
        base_entropy: base,
        conditioned_entropy: conditioned,
        gain: relative_gain(base, conditioned),
        truncated_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CandidateOutcome {
    /// Source already claimed by an earlier anchor of the same root.
    AlreadyUsed,
    Measured(GainMeasurement),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub source_doc_id: String,
    pub outcome: CandidateOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionVerification {
    pub chosen: Option<VerifiedDependency>,
    pub evaluations: Vec<CandidateEvaluation>,
}

impl PositionVerification {
    pub fn measured(&self) -> impl Iterator<Item = &GainMeasurement> {
        self.evaluations.iter().filter_map(|e| match &e.outcome {
            CandidateOutcome::Measured(m) => Some(m),
            _ => None,
        })
    }
}

/// Measures every unused candidate and keeps the one with the largest gain
/// above `epsilon` (earliest rank on ties). The winner's source is added to
/// `used`.
pub fn verify_candidates_for_position(
    scorer: &dyn Scorer,
    root: &[u32],
    anchor: usize,
    candidates: &[Candidate],
    epsilon: f64,
    used: &mut HashSet<String>,
    separator: u32,
) -> Result<PositionVerification, VerificationError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(VerificationError::InvalidEpsilon(epsilon));
    }
    let base = base_entropy(scorer, root, anchor)?;
    let mut evaluations = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, GainMeasurement)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        if used.contains(&cand.source_doc_id) {
            evaluations.push(CandidateEvaluation {
                source_doc_id: cand.source_doc_id.clone(),
                outcome: CandidateOutcome::AlreadyUsed,
            });
            continue;
        }
        let outcome =
            match gain_against_base(scorer, root, anchor, &cand.chunk_tokens, separator, base) {
                Ok(m) => {
                    let best_gain = best.map_or(0.0, |(_, b)| b.gain);
                    if m.gain > epsilon && m.gain > best_gain {
                        best = Some((i, m));
                    }
                    CandidateOutcome::Measured(m)
                }
                Err(e) if e.is_systemic() => return Err(e),
                Err(e) => CandidateOutcome::Skipped(e.to_string()),
            };
        evaluations.push(CandidateEvaluation {
            source_doc_id: cand.source_doc_id.clone(),
            outcome,
        });
    }
    let chosen = best.map(|(i, m)| {
        let mut candidate = candidates[i].clone();
        candidate.chunk_tokens.drain(..m.truncated_tokens);
        used.insert(candidate.source_doc_id.clone());
        VerifiedDependency {
            candidate,
            anchor,
            base_entropy: m.base_entropy,
            conditioned_entropy: m.conditioned_entropy,
            gain: m.gain,
        }
    });
    Ok(PositionVerification {
        chosen,
        evaluations,
    })
}

/// Mean relative entropy reduction at each dependency's anchor when the
/// whole assembled stream precedes it, i.e. the joint effect of all
/// contexts rather than each one in isolation.
pub fn joint_gain(
    scorer: &dyn Scorer,
    stream: &[u32],
    root_offset: usize,
    deps: &[VerifiedDependency],
) -> Result<Option<f64>, VerificationError> {
    if deps.is_empty() {
        return Ok(None);
    }
    let positions: Vec<usize> = deps.iter().map(|d| root_offset + d.anchor).collect();
    if let Some(&last) = positions.iter().max() {
        if last > scorer.max_context() {
            return Ok(None);
        }
    }
    let joint = scorer.entropies(stream, &positions)?;
    let total: f64 = deps
        .iter()
        .zip(&joint)
        .map(|(d, &h)| relative_gain(d.base_entropy, h))
        .sum();
    Ok(Some(total / deps.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{train_ngram, NGramConfig, NGramScorer, NextTokenDistribution};

    /// Scorer whose entropy at a position is looked up from the last token
    /// of the prefix, optionally lowered when a chosen token appears earlier.
    struct TableScorer {
        gains: Vec<(u32, f64)>,
    }

    impl Scorer for TableScorer {
        fn vocab_size(&self) -> usize {
            2
        }
        fn max_context(&self) -> usize {
            usize::MAX
        }
        fn next_token_distribution(
            &self,
            _prefix: &[u32],
        ) -> Result<NextTokenDistribution, ScoringError> {
            unimplemented!("entropy-only fixture")
        }
        fn entropy_after(&self, prefix: &[u32]) -> Result<f64, ScoringError> {
            let base = 2.0;
            let best = self
                .gains
                .iter()
                .filter(|(t, _)| prefix.contains(t))
                .map(|&(_, g)| g)
                .fold(0.0, f64::max);
            Ok(base * (1.0 - best))
        }
    }

    fn cand(id: &str, token: u32, rank: usize) -> Candidate {
        Candidate {
            source_doc_id: id.into(),
            chunk_tokens: vec![token],
            similarity: 0.5,
            rank,
        }
    }

    const SEP: u32 = 1;

    #[test]
    fn gain_arithmetic() {
        assert_eq!(relative_gain(2.0, 0.5), 0.75);
        assert_eq!(relative_gain(2.0, 2.0), 0.0);
        assert!(relative_gain(1.0, 1.5) < 0.0);
    }

    #[test]
    fn empty_chunk_gives_zero_gain_under_separator_boundary() {
        let cfg = NGramConfig::new(2, 1.0, 6).with_boundary(SEP);
        let m = train_ngram([vec![2u32, 3, 4, 5, 2, 4]], &cfg).unwrap();
        let s = NGramScorer::new(m).with_cache_weight(0.5);
        let root = [2u32, 3, 2, 5, 4];
        let g = information_gain(&s, &root, 3, &[], SEP).unwrap();
        assert_eq!(g.gain, 0.0);
        assert_eq!(g.base_entropy, g.conditioned_entropy);
    }

    #[test]
    fn planted_bigram_makes_anchor_nearly_certain() {
        // vocabulary: 0 unk, 1 sep, 2 key, 3 value, 4..9 filler
        let cfg = NGramConfig::new(2, 1.0, 10).with_boundary(SEP);
        let train = vec![vec![4u32, 5, 6, 7, 8, 9, 4, 5, 6, 2, 3, 7, 8, 9]];
        let m = train_ngram(&train, &cfg).unwrap();
        let s = NGramScorer::new(m).with_cache_weight(0.99);
        let root = [4u32, 5, 6, 2, 3, 7];
        let chunk: Vec<u32> = [2u32, 3].repeat(20);
        let g = information_gain(&s, &root, 4, &chunk, SEP).unwrap();
        assert!(g.base_entropy >= 2f64.ln());
        assert!(g.conditioned_entropy < 0.1 * g.base_entropy);
        assert!(g.gain > 0.9);
    }

    #[test]
    fn left_truncation_keeps_chunk_tail() {
        let cfg = NGramConfig::new(2, 1.0, 10).with_boundary(SEP);
        let m = train_ngram([vec![4u32, 5, 6, 7]], &cfg).unwrap();
        let s = NGramScorer::new(m).with_cache_weight(0.5).with_max_context(6);
        let root = [4u32, 5, 6];
        // prefix = kept chunk + sep + root[..2]; room for 6 - 3 = 3 chunk tokens
        let (_, cut) = conditioned_entropy(&s, &root, 2, &[7, 8, 9, 2, 3], SEP).unwrap();
        assert_eq!(cut, 2);
        let tight = NGramScorer::new(train_ngram([vec![4u32]], &cfg).unwrap()).with_max_context(2);
        assert!(matches!(
            conditioned_entropy(&tight, &root, 2, &[7], SEP),
            Err(VerificationError::VerificationSkipped { .. })
        ));
    }

    #[test]
    fn below_epsilon_returns_none() {
        let s = TableScorer {
            gains: vec![(10, 0.1), (11, 0.3)],
        };
        let mut used = HashSet::new();
        let cands = [cand("a", 10, 0), cand("b", 11, 1)];
        let v = verify_candidates_for_position(&s, &[0, 0, 0], 2, &cands, 0.4, &mut used, SEP)
            .unwrap();
        assert!(v.chosen.is_none());
        assert!(used.is_empty());
        assert_eq!(v.measured().count(), 2);
    }

    #[test]
    fn best_gain_wins_not_first_pass() {
        let s = TableScorer {
            gains: vec![(10, 0.5), (11, 0.9), (12, 0.7)],
        };
        let mut used = HashSet::new();
        let cands = [cand("a", 10, 0), cand("b", 11, 1), cand("c", 12, 2)];
        let v = verify_candidates_for_position(&s, &[0, 0, 0], 2, &cands, 0.4, &mut used, SEP)
            .unwrap();
        let chosen = v.chosen.unwrap();
        assert_eq!(chosen.candidate.source_doc_id, "b");
        assert!((chosen.gain - 0.9).abs() < 1e-12);
        assert!(used.contains("b"));
    }

    #[test]
    fn used_set_forces_second_anchor_elsewhere() {
        let s = TableScorer {
            gains: vec![(10, 0.9), (11, 0.6)],
        };
        let mut used = HashSet::new();
        let cands = [cand("shared", 10, 0), cand("other", 11, 1)];
        let first = verify_candidates_for_position(&s, &[0; 8], 2, &cands, 0.4, &mut used, SEP)
            .unwrap();
        assert_eq!(first.chosen.unwrap().candidate.source_doc_id, "shared");
        let second = verify_candidates_for_position(&s, &[0; 8], 6, &cands, 0.4, &mut used, SEP)
            .unwrap();
        assert_eq!(second.chosen.unwrap().candidate.source_doc_id, "other");
        assert_eq!(second.evaluations[0].outcome, CandidateOutcome::AlreadyUsed);
        let third = verify_candidates_for_position(&s, &[0; 8], 7, &cands, 0.4, &mut used, SEP)
            .unwrap();
        assert!(third.chosen.is_none());
    }

    #[test]
    fn epsilon_range_is_checked() {
        let s = TableScorer { gains: vec![] };
        for eps in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                verify_candidates_for_position(&s, &[0], 0, &[], eps, &mut HashSet::new(), SEP),
                Err(VerificationError::InvalidEpsilon(_))
            ));
        }
    }
}
