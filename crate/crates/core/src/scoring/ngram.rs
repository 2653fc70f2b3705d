//! Add-k smoothed n-gram model with an optional in-context cache.
//!
//! The static model is plain add-k over counts from a training corpus. On
//! top of it, [`NGramScorer`] can interpolate a cache distribution built
//! from the n-grams of the prefix being scored:
//!
//! ```text
//! P(v | ctx, prefix) = (1 - w) * P_static(v | ctx) + w * c_prefix(ctx, v) / c_prefix(ctx)
//! ```
//!
//! where `w` is the cache weight, applied only when `ctx` occurs in the
//! prefix. This is what lets a prepended context change the prediction at a
//! later position. A boundary token (the separator) ends the context: no
//! n-gram spans it and it is never counted.

use std::collections::{BTreeMap, HashMap};

use fnv::FnvHashMap;

use super::{NextTokenDistribution, Scorer, ScoringError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NGramConfig {
    pub order: usize,
    pub smoothing_k: f64,
    pub vocab_size: usize,
    /// Token that separates independent segments.
    pub boundary: Option<u32>,
}

impl NGramConfig {
    pub fn new(order: usize, smoothing_k: f64, vocab_size: usize) -> Self {
        NGramConfig {
            order,
            smoothing_k,
            vocab_size,
            boundary: None,
        }
    }

    pub fn with_boundary(mut self, boundary: u32) -> Self {
        self.boundary = Some(boundary);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextCounts {
    pub total: u64,
    pub next: BTreeMap<u32, u64>,
}

impl ContextCounts {
    fn add(&mut self, token: u32) {
        self.total += 1;
        *self.next.entry(token).or_default() += 1;
    }

    pub fn count(&self, token: u32) -> u64 {
        self.next.get(&token).copied().unwrap_or(0)
    }
}

type Table = FnvHashMap<Vec<u32>, ContextCounts>;

/// Immutable n-gram counts for every context length `0..order`.
#[derive(Debug, Clone)]
pub struct NGramModel {
    config: NGramConfig,
    /// `tables[c]` maps a context of `c` tokens to its continuation counts.
    tables: Vec<Table>,
}

/// Counts every n-gram of orders `1..=order` in `corpus`.
pub fn train_ngram<I>(corpus: I, config: &NGramConfig) -> Result<NGramModel, ScoringError>
where
    I: IntoIterator,
    I::Item: AsRef<[u32]>,
{
    if config.order == 0 {
        return Err(ScoringError::InvalidOrder);
    }
    if !(config.smoothing_k.is_finite() && config.smoothing_k > 0.0) {
        return Err(ScoringError::InvalidSmoothing(config.smoothing_k));
    }
    let mut tables = vec![Table::default(); config.order];
    let mut seen_any = false;
    for seq in corpus {
        let seq = seq.as_ref();
        for &t in seq {
            if t as usize >= config.vocab_size {
                return Err(ScoringError::TokenOutOfVocabulary {
                    token: t,
                    vocab_size: config.vocab_size,
                });
            }
        }
        let segments = seq.split(|t| Some(*t) == config.boundary);
        for seg in segments {
            for i in 0..seg.len() {
                seen_any = true;
                for (c, table) in tables.iter_mut().enumerate().take(i + 1) {
                    table.entry(seg[i - c..i].to_vec()).or_default().add(seg[i]);
                }
            }
        }
    }
    if !seen_any {
        return Err(ScoringError::NoTrainingData);
    }
    Ok(NGramModel {
        config: *config,
        tables,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn smoothing_k(&self) -> f64 {
        self.config.smoothing_k
    }

    pub fn boundary(&self) -> Option<u32> {
        self.config.boundary
    }

    pub fn counts(&self, context: &[u32]) -> Option<&ContextCounts> {
        self.tables.get(context.len())?.get(context)
    }

    /// Smoothed static probability `P(token | context)` where `context` is
    /// at most `order - 1` tokens long.
    pub fn probability(&self, context: &[u32], token: u32) -> f64 {
        let k = self.config.smoothing_k;
        let v = self.config.vocab_size as f64;
        match self.counts(context) {
            Some(c) => (c.count(token) as f64 + k) / (c.total as f64 + k * v),
            None => 1.0 / v,
        }
    }
}

/// Running state while walking a prefix left to right.
struct PrefixCache<'a> {
    order: usize,
    boundary: Option<u32>,
    tables: Vec<FnvHashMap<&'a [u32], ContextCounts>>,
    track: bool,
    segment_start: usize,
    pos: usize,
}

impl<'a> PrefixCache<'a> {
    fn new(model: &NGramModel, track: bool) -> Self {
        PrefixCache {
            order: model.config.order,
            boundary: model.config.boundary,
            tables: vec![FnvHashMap::default(); model.config.order],
            track,
            segment_start: 0,
            pos: 0,
        }
    }

    /// Consumes `tokens[self.pos]`.
    fn advance(&mut self, tokens: &'a [u32]) {
        let t = self.pos;
        let x = tokens[t];
        self.pos += 1;
        if Some(x) == self.boundary {
            self.segment_start = self.pos;
            return;
        }
        if self.track {
            let avail = t - self.segment_start;
            for c in 0..self.order.min(avail + 1) {
                self.tables[c].entry(&tokens[t - c..t]).or_default().add(x);
            }
        }
    }

    /// Context for predicting `tokens[self.pos]`.
    fn context<'t>(&self, tokens: &'t [u32]) -> &'t [u32] {
        let avail = self.pos - self.segment_start;
        let c = (self.order - 1).min(avail);
        &tokens[self.pos - c..self.pos]
    }

    fn cached(&self, context: &[u32]) -> Option<&ContextCounts> {
        self.tables[context.len()].get(context).filter(|c| c.total > 0)
    }
}

/// Scorer backed by an [`NGramModel`].
#[derive(Debug, Clone)]
pub struct NGramScorer {
    model: NGramModel,
    cache_weight: f64,
    max_context: usize,
}

impl NGramScorer {
    pub fn new(model: NGramModel) -> Self {
        NGramScorer {
            model,
            cache_weight: 0.0,
            max_context: usize::MAX,
        }
    }

    /// Interpolation weight of the in-prefix cache, in `[0, 1)`.
    pub fn with_cache_weight(mut self, weight: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&weight),
            "cache weight must lie in [0, 1), got {weight}"
        );
        self.cache_weight = weight;
        self
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn model(&self) -> &NGramModel {
        &self.model
    }

    pub fn cache_weight(&self) -> f64 {
        self.cache_weight
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ScoringError> {
        let vocab_size = self.model.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= vocab_size) {
            Some(&token) => Err(ScoringError::TokenOutOfVocabulary { token, vocab_size }),
            None => Ok(()),
        }
    }

    /// Static and cache counts for the token following `prefix`, found by
    /// scanning the prefix for the context instead of building the whole
    /// cache. Gives the same counts as walking the prefix incrementally.
    fn lookup(&self, prefix: &[u32]) -> (Option<&ContextCounts>, Option<ContextCounts>) {
        let boundary = self.model.boundary();
        let segment_start = boundary
            .and_then(|b| prefix.iter().rposition(|&t| t == b))
            .map_or(0, |i| i + 1);
        let c = (self.model.order() - 1).min(prefix.len() - segment_start);
        let context = &prefix[prefix.len() - c..];
        let stat = self.model.counts(context);
        if self.cache_weight == 0.0 {
            return (stat, None);
        }
        // a window equal to `context` cannot contain the boundary, so it
        // lies inside one segment
        let mut counts = ContextCounts::default();
        for t in c..prefix.len() {
            let x = prefix[t];
            if Some(x) != boundary && prefix[t - c..t] == *context {
                counts.add(x);
            }
        }
        (stat, (counts.total > 0).then_some(counts))
    }

    fn weights(&self, cached: Option<&ContextCounts>) -> (f64, f64) {
        match cached {
            Some(_) => (1.0 - self.cache_weight, self.cache_weight),
            None => (1.0, 0.0),
        }
    }

    fn dense(&self, stat: Option<&ContextCounts>, cached: Option<&ContextCounts>) -> Vec<f64> {
        let v = self.model.vocab_size();
        let k = self.model.smoothing_k();
        let (ws, wc) = self.weights(cached);
        let denom = stat.map_or(0, |c| c.total) as f64 + k * v as f64;
        let mut probs = vec![ws * k / denom; v];
        if let Some(s) = stat {
            for (&t, &n) in &s.next {
                probs[t as usize] += ws * n as f64 / denom;
            }
        }
        if let Some(c) = cached {
            for (&t, &n) in &c.next {
                probs[t as usize] += wc * n as f64 / c.total as f64;
            }
        }
        probs
    }

    /// Entropy without materializing the vocabulary-sized vector: every
    /// token outside both supports shares the same smoothed probability.
    fn sparse_entropy(&self, stat: Option<&ContextCounts>, cached: Option<&ContextCounts>) -> f64 {
        let v = self.model.vocab_size();
        let k = self.model.smoothing_k();
        let (ws, wc) = self.weights(cached);
        let denom = stat.map_or(0, |c| c.total) as f64 + k * v as f64;
        let floor = ws * k / denom;

        let empty = BTreeMap::new();
        let s_next = stat.map_or(&empty, |c| &c.next);
        let c_next = cached.map_or(&empty, |c| &c.next);
        let c_total = cached.map_or(1, |c| c.total) as f64;

        let mut h = 0.0;
        let mut support = 0usize;
        let mut term = |p: f64| {
            support += 1;
            if p > 0.0 {
                h -= p * p.ln();
            }
        };
        let mut si = s_next.iter().peekable();
        let mut ci = c_next.iter().peekable();
        loop {
            let p = match (si.peek(), ci.peek()) {
                (None, None) => break,
                (Some(&(&ts, &ns)), Some(&(&tc, &nc))) if ts == tc => {
                    si.next();
                    ci.next();
                    floor + ws * ns as f64 / denom + wc * nc as f64 / c_total
                }
                (Some(&(&ts, &ns)), Some(&(&tc, _))) if ts < tc => {
                    si.next();
                    floor + ws * ns as f64 / denom
                }
                (Some(&(_, &ns)), None) => {
                    si.next();
                    floor + ws * ns as f64 / denom
                }
                (_, Some(&(_, &nc))) => {
                    ci.next();
                    floor + wc * nc as f64 / c_total
                }
            };
            term(p);
        }
        let rest = v - support;
        if rest > 0 && floor > 0.0 {
            h -= rest as f64 * floor * floor.ln();
        }
        h.max(0.0)
    }
}

impl Scorer for NGramScorer {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn next_token_distribution(
        &self,
        prefix: &[u32],
    ) -> Result<NextTokenDistribution, ScoringError> {
        if prefix.len() > self.max_context {
            return Err(ScoringError::ContextOverflow {
                len: prefix.len(),
                max: self.max_context,
            });
        }
        self.check_tokens(prefix)?;
        let (stat, cached) = self.lookup(prefix);
        NextTokenDistribution::new(self.dense(stat, cached.as_ref()))
    }

    fn entropy_after(&self, prefix: &[u32]) -> Result<f64, ScoringError> {
        if prefix.len() > self.max_context {
            return Err(ScoringError::ContextOverflow {
                len: prefix.len(),
                max: self.max_context,
            });
        }
        self.check_tokens(prefix)?;
        let (stat, cached) = self.lookup(prefix);
        Ok(self.sparse_entropy(stat, cached.as_ref()))
    }

    /// Single left-to-right pass over `tokens`.
    fn entropies(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<f64>, ScoringError> {
        let Some(&last) = positions.iter().max() else {
            return Ok(Vec::new());
        };
        if last >= tokens.len() {
            return Err(ScoringError::PositionOutOfRange {
                position: last,
                len: tokens.len(),
            });
        }
        if last > self.max_context {
            return Err(ScoringError::ContextOverflow {
                len: last,
                max: self.max_context,
            }
            .at(last));
        }
        self.check_tokens(&tokens[..last])?;

        let mut wanted: Vec<usize> = positions.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        if let [p] = wanted[..] {
            let (stat, cached) = self.lookup(&tokens[..p]);
            return Ok(vec![self.sparse_entropy(stat, cached.as_ref()); positions.len()]);
        }
        let mut computed = HashMap::with_capacity(wanted.len());
        let mut cache = PrefixCache::new(&self.model, self.cache_weight > 0.0);
        for &p in &wanted {
            while cache.pos < p {
                cache.advance(tokens);
            }
            let context = cache.context(tokens);
            let stat = self.model.counts(context);
            computed.insert(p, self.sparse_entropy(stat, cache.cached(context)));
        }
        Ok(positions.iter().map(|p| computed[p]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::entropy;
    use proptest::prelude::*;

    fn bigram_0101() -> NGramModel {
        train_ngram([vec![0u32, 1, 0, 1]], &NGramConfig::new(2, 1.0, 2)).unwrap()
    }

    #[test]
    fn hand_computed_add_one_bigram() {
        let m = bigram_0101();
        assert!((m.probability(&[0], 1) - 0.75).abs() < 1e-15);
        assert!((m.probability(&[0], 0) - 0.25).abs() < 1e-15);
        let d = NGramScorer::new(m)
            .next_token_distribution(&[1, 0])
            .unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn tiny_k_unigram_is_nearly_deterministic() {
        let m = train_ngram([vec![0u32, 0, 0]], &NGramConfig::new(1, 1e-6, 2)).unwrap();
        let d = NGramScorer::new(m).next_token_distribution(&[0, 0]).unwrap();
        // (3 + 1e-6) / (3 + 2e-6)
        assert!((d.probs()[0] - (3.0 + 1e-6) / (3.0 + 2e-6)).abs() < 1e-15);
        assert!(d.probs()[0] > 1.0 - 1e-6);
    }

    #[test]
    fn empty_prefix_uses_unigram_counts() {
        let corpus = vec![vec![0u32, 1, 1, 2], vec![1, 1]];
        let m = train_ngram(&corpus, &NGramConfig::new(3, 0.5, 4)).unwrap();
        let d = NGramScorer::new(m).next_token_distribution(&[]).unwrap();
        // unigram counts 0:1, 1:4, 2:1, 3:0 over 6 tokens
        let expect: Vec<f64> = [1.0, 4.0, 1.0, 0.0]
            .iter()
            .map(|c| (c + 0.5) / (6.0 + 0.5 * 4.0))
            .collect();
        for (a, b) in d.probs().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let c = vec![vec![0u32]];
        assert!(matches!(
            train_ngram(&c, &NGramConfig::new(0, 1.0, 2)),
            Err(ScoringError::InvalidOrder)
        ));
        assert!(matches!(
            train_ngram(&c, &NGramConfig::new(2, 0.0, 2)),
            Err(ScoringError::InvalidSmoothing(_))
        ));
        let empty: Vec<Vec<u32>> = vec![vec![]];
        assert!(matches!(
            train_ngram(&empty, &NGramConfig::new(2, 1.0, 2)),
            Err(ScoringError::NoTrainingData)
        ));
        assert!(matches!(
            train_ngram([vec![5u32]], &NGramConfig::new(2, 1.0, 2)),
            Err(ScoringError::TokenOutOfVocabulary { token: 5, .. })
        ));
    }

    #[test]
    fn context_overflow() {
        let s = NGramScorer::new(bigram_0101()).with_max_context(2);
        assert!(matches!(
            s.next_token_distribution(&[0, 1, 0]),
            Err(ScoringError::ContextOverflow { len: 3, max: 2 })
        ));
    }

    #[test]
    fn cache_makes_seen_continuation_dominant() {
        // static model knows nothing about token 3 after 2
        let m = train_ngram([vec![0u32, 1, 0, 1]], &NGramConfig::new(2, 1.0, 5)).unwrap();
        let s = NGramScorer::new(m).with_cache_weight(0.9);
        let without = s.entropy_after(&[0, 2]).unwrap();
        let with = s.entropy_after(&[2, 3, 2, 3, 0, 2]).unwrap();
        assert!((without - 5f64.ln()).abs() < 1e-12);
        assert!(with < 0.6 * without);
        let d = s.next_token_distribution(&[2, 3, 2, 3, 0, 2]).unwrap();
        assert!(d.probs()[3] > 0.9);
    }

    #[test]
    fn boundary_hides_preceding_segment() {
        let cfg = NGramConfig::new(2, 1.0, 6).with_boundary(5);
        let m = train_ngram([vec![0u32, 1, 2, 3, 4]], &cfg).unwrap();
        let s = NGramScorer::new(m).with_cache_weight(0.5);
        let plain = s.entropy_after(&[0, 1, 2]).unwrap();
        let with_sep = s.entropy_after(&[5, 0, 1, 2]).unwrap();
        assert_eq!(plain.to_bits(), with_sep.to_bits());
        // after a boundary the static context is empty (unigram) while the
        // cache still remembers what came before it
        let no_cache = NGramScorer::new(s.model().clone());
        let after = no_cache.next_token_distribution(&[3, 2, 5]).unwrap();
        assert_eq!(after, no_cache.next_token_distribution(&[]).unwrap());
        let cached = s.next_token_distribution(&[3, 2, 5]).unwrap();
        assert!(cached.probs()[3] > after.probs()[3]);
        assert!(cached.probs()[2] > after.probs()[2]);
        assert_eq!(cached.probs()[5], 0.5 * after.probs()[5]);
    }

    fn corpus_strategy() -> impl Strategy<Value = (usize, Vec<Vec<u32>>)> {
        (2usize..9).prop_flat_map(|v| {
            (
                Just(v),
                prop::collection::vec(prop::collection::vec(0..v as u32, 1..30), 1..5),
            )
        })
    }

    proptest! {
        #[test]
        fn conditionals_sum_to_one(
            (v, corpus) in corpus_strategy(),
            order in 1usize..4,
            k in 0.01f64..3.0,
            w in 0.0f64..0.95,
            prefix_seed in prop::collection::vec(0u32..100, 0..20),
        ) {
            let m = train_ngram(&corpus, &NGramConfig::new(order, k, v)).unwrap();
            let s = NGramScorer::new(m).with_cache_weight(w);
            let prefix: Vec<u32> = prefix_seed.iter().map(|t| t % v as u32).collect();
            let d = s.next_token_distribution(&prefix).unwrap();
            let total: f64 = d.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            // static bookkeeping: sum_v (count + k) == total + k |V|
            let ctx_len = (order - 1).min(prefix.len());
            let ctx = &prefix[prefix.len() - ctx_len..];
            let static_sum: f64 = (0..v as u32).map(|t| s.model().probability(ctx, t)).sum();
            prop_assert!((static_sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn batched_entropies_match_single_position_oracle(
            (v, corpus) in corpus_strategy(),
            order in 1usize..4,
            w in 0.0f64..0.95,
            seq_seed in prop::collection::vec(0u32..100, 1..40),
        ) {
            let m = train_ngram(&corpus, &NGramConfig::new(order, 1.0, v)).unwrap();
            let s = NGramScorer::new(m).with_cache_weight(w);
            let seq: Vec<u32> = seq_seed.iter().map(|t| t % v as u32).collect();
            let positions: Vec<usize> = (0..seq.len()).collect();
            let batched = s.entropies(&seq, &positions).unwrap();
            for t in 0..seq.len() {
                let dense = s.next_token_distribution(&seq[..t]).unwrap();
                let oracle = entropy(dense.probs()).unwrap();
                prop_assert!((batched[t] - oracle).abs() < 1e-9, "t={} {} vs {}", t, batched[t], oracle);
            }
        }
    }
}
