use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::Strategy;
use crate::http::RemoteConfig;
use crate::retrieval::HashedTfEmbedder;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("invalid {kind} spec {spec:?}: {message}")]
    Spec {
        kind: &'static str,
        spec: String,
        message: String,
    },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramSpec {
    pub order: usize,
    pub smoothing_k: f64,
    /// Weight of the in-prefix cache component; see [`crate::NGramScorer`].
    pub cache_weight: f64,
    /// Longest prefix accepted; unlimited when absent.
    pub max_context: Option<usize>,
}

impl Default for NGramSpec {
    fn default() -> Self {
        NGramSpec {
            order: 2,
            smoothing_k: 1.0,
            cache_weight: 0.9,
            max_context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScorerSpec {
    Ngram(NGramSpec),
    /// Remote scorer; it also tokenizes, through `/tokenize`.
    Remote(RemoteConfig),
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec::Ngram(NGramSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashedSpec {
    pub dim: usize,
}

impl Default for HashedSpec {
    fn default() -> Self {
        HashedSpec {
            dim: HashedTfEmbedder::DEFAULT_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderSpec {
    Hashed(HashedSpec),
    Remote(RemoteConfig),
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashed(HashedSpec::default())
    }
}

/// Splits `name[:rest]`.
fn split_spec(s: &str) -> (&str, Option<&str>) {
    match s.split_once(':') {
        Some((name, rest)) => (name.trim(), Some(rest.trim())),
        None => (s.trim(), None),
    }
}

/// Parses `key=value` pairs separated by commas.
fn parse_pairs<'a>(
    kind: &'static str,
    spec: &str,
    rest: &'a str,
) -> Result<Vec<(&'a str, &'a str)>, ConfigError> {
    rest.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Spec {
                    kind,
                    spec: spec.to_string(),
                    message: format!("expected key=value, got {p:?}"),
                })
        })
        .collect()
}

fn parse_value<T: FromStr>(kind: &'static str, spec: &str, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Spec {
        kind,
        spec: spec.to_string(),
        message: format!("bad value {v:?} for {key}"),
    })
}

/// `ngram[:order=N,k=K,cache=W,max_context=M]` or `remote:URL`.
impl FromStr for ScorerSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        const KIND: &str = "scorer";
        let bad = |message: String| ConfigError::Spec {
            kind: KIND,
            spec: s.to_string(),
            message,
        };
        match split_spec(s) {
            ("ngram", rest) => {
                let mut spec = NGramSpec::default();
                for (k, v) in parse_pairs(KIND, s, rest.unwrap_or(""))? {
                    match k {
                        "order" | "n" => spec.order = parse_value(KIND, s, k, v)?,
                        "k" | "smoothing_k" => spec.smoothing_k = parse_value(KIND, s, k, v)?,
                        "cache" | "cache_weight" => spec.cache_weight = parse_value(KIND, s, k, v)?,
                        "max_context" => spec.max_context = Some(parse_value(KIND, s, k, v)?),
                        other => return Err(bad(format!("unknown key {other:?}"))),
                    }
                }
                Ok(ScorerSpec::Ngram(spec))
            }
            ("remote", Some(url)) if !url.is_empty() => Ok(ScorerSpec::Remote(RemoteConfig::new(url))),
            _ => Err(bad("expected ngram[:key=value,...] or remote:<url>".into())),
        }
    }
}

impl fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerSpec::Ngram(n) => {
                write!(f, "ngram:order={},k={},cache={}", n.order, n.smoothing_k, n.cache_weight)?;
                if let Some(m) = n.max_context {
                    write!(f, ",max_context={m}")?;
                }
                Ok(())
            }
            ScorerSpec::Remote(r) => write!(f, "remote:{}", r.endpoint),
        }
    }
}

/// `hashed[:DIM]` or `remote:URL`.
impl FromStr for EmbedderSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |message: &str| ConfigError::Spec {
            kind: "embedder",
            spec: s.to_string(),
            message: message.to_string(),
        };
        match split_spec(s) {
            ("hashed", None) => Ok(EmbedderSpec::default()),
            ("hashed", Some(dim)) => {
                let dim = dim.strip_prefix("dim=").unwrap_or(dim);
                Ok(EmbedderSpec::Hashed(HashedSpec {
                    dim: dim.parse().map_err(|_| bad("dimension must be an integer"))?,
                }))
            }
            ("remote", Some(url)) if !url.is_empty() => Ok(EmbedderSpec::Remote(RemoteConfig::new(url))),
            _ => Err(bad("expected hashed[:dim] or remote:<url>")),
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Hashed(h) => write!(f, "hashed:{}", h.dim),
            EmbedderSpec::Remote(r) => write!(f, "remote:{}", r.endpoint),
        }
    }
}

/// Every knob of a construction run. Loaded from TOML; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root documents.
    pub source_corpus: PathBuf,
    /// Documents to retrieve contexts from; the source corpus if absent.
    pub retrieval_corpus: Option<PathBuf>,
    /// Sample records, one per line.
    pub output: PathBuf,
    pub stats_output: Option<PathBuf>,
    /// Prebuilt index to load instead of indexing the retrieval corpus.
    pub index: Option<PathBuf>,
    /// When set, samples are also packed into `target_len` bins here.
    pub packed_output: Option<PathBuf>,
    /// Read at most this many source documents.
    pub limit: Option<usize>,

    pub alpha: f64,
    pub epsilon: f64,
    pub window: usize,
    pub top_k: usize,
    pub target_len: usize,
    pub strategy: Strategy,
    pub min_tokens: usize,
    pub min_deps: usize,
    pub max_positions_per_doc: usize,
    /// Retrieval chunks keep at most this many tokens.
    pub max_context_tokens: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Drop retrieval chunks whose tokens repeat an earlier chunk.
    pub dedup_retrieval: bool,
    /// Also score each emitted sample's anchors with every context in place.
    pub joint_gain_report: bool,

    pub scorer: ScorerSpec,
    pub embedder: EmbedderSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            source_corpus: PathBuf::new(),
            retrieval_corpus: None,
            output: PathBuf::from("samples.jsonl"),
            stats_output: None,
            index: None,
            packed_output: None,
            limit: None,
            alpha: 2.0,
            epsilon: 0.4,
            window: 16,
            top_k: 32,
            target_len: 131_072,
            strategy: Strategy::Shuffle,
            min_tokens: 64,
            min_deps: 1,
            max_positions_per_doc: 64,
            max_context_tokens: 1024,
            seed: 0,
            workers: 0,
            dedup_retrieval: false,
            joint_gain_report: false,
            scorer: ScorerSpec::default(),
            embedder: EmbedderSpec::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.source_corpus);
        fix(&mut self.output);
        for p in [
            &mut self.retrieval_corpus,
            &mut self.stats_output,
            &mut self.index,
            &mut self.packed_output,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn retrieval_path(&self) -> &Path {
        self.retrieval_corpus.as_deref().unwrap_or(&self.source_corpus)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.source_corpus.as_os_str().is_empty() {
            return Err(invalid("source_corpus", "a source corpus path is required"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid("alpha", format!("must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(invalid("epsilon", format!("must lie in (0, 1], got {}", self.epsilon)));
        }
        if self.window == 0 {
            return Err(invalid("window", "must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k", "must be at least 1"));
        }
        if self.min_tokens == 0 {
            return Err(invalid("min_tokens", "must be at least 1"));
        }
        if self.target_len < self.min_tokens {
            return Err(invalid(
                "target_len",
                format!("{} is below min_tokens {}", self.target_len, self.min_tokens),
            ));
        }
        if self.max_positions_per_doc == 0 {
            return Err(invalid("max_positions_per_doc", "must be at least 1"));
        }
        if self.max_context_tokens == 0 {
            return Err(invalid("max_context_tokens", "must be at least 1"));
        }
        match &self.scorer {
            ScorerSpec::Ngram(n) => {
                if n.order == 0 {
                    return Err(invalid("scorer.order", "must be at least 1"));
                }
                if !(n.smoothing_k.is_finite() && n.smoothing_k > 0.0) {
                    return Err(invalid("scorer.smoothing_k", "must be > 0"));
                }
                if !(0.0..1.0).contains(&n.cache_weight) {
                    return Err(invalid("scorer.cache_weight", "must lie in [0, 1)"));
                }
                if n.max_context == Some(0) {
                    return Err(invalid("scorer.max_context", "must be at least 1"));
                }
            }
            ScorerSpec::Remote(r) => validate_remote("scorer", r)?,
        }
        match &self.embedder {
            EmbedderSpec::Hashed(h) if h.dim == 0 => {
                return Err(invalid("embedder.dim", "must be at least 1"))
            }
            EmbedderSpec::Remote(r) => validate_remote("embedder", r)?,
            _ => {}
        }
        Ok(())
    }
}

fn validate_remote(key: &'static str, r: &RemoteConfig) -> Result<(), ConfigError> {
    if !(r.endpoint.starts_with("http://") || r.endpoint.starts_with("https://")) {
        return Err(invalid(key, format!("endpoint {:?} is not an http(s) URL", r.endpoint)));
    }
    if r.max_in_flight == 0 {
        return Err(invalid(key, "max_in_flight must be at least 1"));
    }
    Ok(())
}
