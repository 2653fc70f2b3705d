//! Ordering verified contexts and concatenating them ahead of the root
//! document into token-bounded samples.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TokenSequence;
use crate::verification::VerifiedDependency;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("no dependencies to order")]
    EmptyDependencies,
    #[error("root document of {len} tokens exceeds target length {target}")]
    RootTooLong { len: usize, target: usize },
    #[error("sample discarded: {kept} dependencies fit, {required} required")]
    SampleDiscarded { kept: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Seeded random permutation of the contexts.
    #[default]
    Shuffle,
    /// Contexts in the order of their anchors in the root document.
    Sequence,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Shuffle => "shuffle",
            Strategy::Sequence => "sequence",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shuffle" => Ok(Strategy::Shuffle),
            "sequence" => Ok(Strategy::Sequence),
            other => Err(format!("unknown strategy {other:?} (expected shuffle or sequence)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub strategy: Strategy,
    pub target_len: usize,
    pub global_seed: u64,
    pub separator: u32,
    /// Samples with fewer surviving dependencies are discarded.
    pub min_deps: usize,
}

/// A root document preceded by its verified contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub root_doc_id: String,
    /// In verification (ascending anchor) order.
    pub dependencies: Vec<VerifiedDependency>,
    /// `permutation[i]` is the dependency emitted `i`-th.
    pub permutation: Vec<usize>,
    /// Stream offset of each dependency's chunk, parallel to `dependencies`.
    pub chunk_offsets: Vec<usize>,
    pub root_offset: usize,
    pub separator_positions: Vec<usize>,
    pub total_tokens: usize,
    pub tokens: Vec<u32>,
    pub strategy: Strategy,
}

impl TrainingSample {
    pub fn root_tokens(&self) -> &[u32] {
        &self.tokens[self.root_offset..]
    }
}

fn shuffle_rng(global_seed: u64, root_doc_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(root_doc_id.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Emission order for `deps`.
pub fn order_contexts(
    deps: &[VerifiedDependency],
    strategy: Strategy,
    root_doc_id: &str,
    global_seed: u64,
) -> Result<Vec<usize>, AssemblyError> {
    if deps.is_empty() {
        return Err(AssemblyError::EmptyDependencies);
    }
    let mut order: Vec<usize> = (0..deps.len()).collect();
    match strategy {
        Strategy::Sequence => order.sort_by(|&a, &b| {
            deps[a]
                .anchor
                .cmp(&deps[b].anchor)
                .then_with(|| deps[a].candidate.source_doc_id.cmp(&deps[b].candidate.source_doc_id))
        }),
        Strategy::Shuffle => order.shuffle(&mut shuffle_rng(global_seed, root_doc_id)),
    }
    Ok(order)
}

fn stream_len(deps: &[VerifiedDependency], root_len: usize) -> usize {
    deps.iter().map(|d| d.candidate.chunk_tokens.len() + 1).sum::<usize>() + root_len
}

/// Drops the lowest-gain dependencies (later anchor first on ties) until
/// the stream fits `target_len`. Survivors keep their relative order.
pub fn fit_to_budget(
    deps: &[VerifiedDependency],
    root_len: usize,
    target_len: usize,
) -> Vec<VerifiedDependency> {
    let mut by_gain: Vec<usize> = (0..deps.len()).collect();
    by_gain.sort_by(|&a, &b| {
        deps[a]
            .gain
            .total_cmp(&deps[b].gain)
            .then(deps[b].anchor.cmp(&deps[a].anchor))
    });
    let mut keep = vec![true; deps.len()];
    let mut total = stream_len(deps, root_len);
    for i in by_gain {
        if total <= target_len {
            break;
        }
        keep[i] = false;
        total -= deps[i].candidate.chunk_tokens.len() + 1;
    }
    deps.iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(d, _)| d.clone())
        .collect()
}

pub fn assemble_sample(
    deps: &[VerifiedDependency],
    root: &TokenSequence,
    config: &AssemblyConfig,
) -> Result<TrainingSample, AssemblyError> {
    if root.len() > config.target_len {
        return Err(AssemblyError::RootTooLong {
            len: root.len(),
            target: config.target_len,
        });
    }
    let survivors = fit_to_budget(deps, root.len(), config.target_len);
    if survivors.len() < config.min_deps {
        return Err(AssemblyError::SampleDiscarded {
            kept: survivors.len(),
            required: config.min_deps,
        });
    }
    let permutation = if survivors.is_empty() {
        Vec::new()
    } else {
        order_contexts(&survivors, config.strategy, &root.doc_id, config.global_seed)?
    };

    let total = stream_len(&survivors, root.len());
    let mut tokens = Vec::with_capacity(total);
    let mut chunk_offsets = vec![0; survivors.len()];
    let mut separator_positions = Vec::with_capacity(survivors.len());
    for &i in &permutation {
        chunk_offsets[i] = tokens.len();
        tokens.extend_from_slice(&survivors[i].candidate.chunk_tokens);
        separator_positions.push(tokens.len());
        tokens.push(config.separator);
    }
    let root_offset = tokens.len();
    tokens.extend_from_slice(&root.tokens);
    debug_assert_eq!(tokens.len(), total);

    Ok(TrainingSample {
        root_doc_id: root.doc_id.clone(),
        dependencies: survivors,
        permutation,
        chunk_offsets,
        root_offset,
        separator_positions,
        total_tokens: total,
        tokens,
        strategy: config.strategy,
    })
}

/// Whole samples greedily concatenated into bins of at most `target_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedBin {
    /// Indices of the member samples, in order.
    pub members: Vec<usize>,
    pub tokens: Vec<u32>,
}

/// Fills bins in sample order, separating members with `separator`. A
/// sample never straddles two bins.
pub fn pack_samples(samples: &[TrainingSample], target_len: usize, separator: u32) -> Vec<PackedBin> {
    let mut bins: Vec<PackedBin> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let fits = bins.last().is_some_and(|b| b.tokens.len() + 1 + s.tokens.len() <= target_len);
        if fits {
            let bin = bins.last_mut().expect("checked above");
            bin.tokens.push(separator);
            bin.tokens.extend_from_slice(&s.tokens);
            bin.members.push(i);
        } else {
            bins.push(PackedBin {
                members: vec![i],
                tokens: s.tokens.clone(),
            });
        }
    }
    bins
}
