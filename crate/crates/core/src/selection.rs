//! Document-adaptive selection of high-entropy positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::EntropyProfile;

/// Positions at or below this entropy are never anchors; the relative gain
/// divides by the anchor entropy.
pub const MIN_ANCHOR_ENTROPY: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("entropy profile is empty")]
    EmptyProfile,
    #[error("alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("threshold must be finite, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighEntropySet {
    pub doc_id: String,
    pub threshold: f64,
    /// Selectivity used to derive `threshold`, if it was derived.
    pub alpha: Option<f64>,
    /// Strictly increasing.
    pub positions: Vec<usize>,
    /// Size of the set before any per-document cap.
    pub uncapped_len: usize,
}

impl HighEntropySet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `mean + alpha * std` of the profile.
pub fn adaptive_threshold(profile: &EntropyProfile, alpha: f64) -> Result<f64, SelectionError> {
    if profile.is_empty() {
        return Err(SelectionError::EmptyProfile);
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(SelectionError::InvalidAlpha(alpha));
    }
    Ok(profile.mean + alpha * profile.std)
}

/// Every position whose entropy strictly exceeds `threshold`, ascending.
pub fn select_high_entropy_positions(
    profile: &EntropyProfile,
    threshold: f64,
) -> Result<HighEntropySet, SelectionError> {
    if !threshold.is_finite() {
        return Err(SelectionError::InvalidThreshold(threshold));
    }
    let positions: Vec<usize> = profile
        .entropies
        .iter()
        .enumerate()
        .filter(|&(_, &h)| h > threshold && h > MIN_ANCHOR_ENTROPY)
        .map(|(t, _)| t)
        .collect();
    Ok(HighEntropySet {
        doc_id: profile.doc_id.clone(),
        threshold,
        alpha: None,
        uncapped_len: positions.len(),
        positions,
    })
}

/// Keeps the `max` highest-entropy positions (earlier position wins ties),
/// returned in ascending order.
pub fn cap_positions(mut set: HighEntropySet, profile: &EntropyProfile, max: usize) -> HighEntropySet {
    if set.positions.len() <= max {
        return set;
    }
    let h = &profile.entropies;
    set.positions
        .sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    set.positions.truncate(max);
    set.positions.sort_unstable();
    set
}

/// Threshold, select, and cap in one step.
pub fn select_anchors(
    profile: &EntropyProfile,
    alpha: f64,
    max_positions: usize,
) -> Result<HighEntropySet, SelectionError> {
    let threshold = adaptive_threshold(profile, alpha)?;
    let mut set = select_high_entropy_positions(profile, threshold)?;
    set.alpha = Some(alpha);
    Ok(cap_positions(set, profile, max_positions))
}
