use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{NextTokenDistribution, Scorer, ScorerStats, ScoringError};
use crate::http::{HttpError, JsonClient, RemoteConfig};

#[derive(Serialize)]
struct ScoreRequest<'a> {
    tokens: &'a [u32],
    positions: &'a [usize],
}

#[derive(Deserialize)]
struct ScoreResponse {
    entropies: Vec<f64>,
    #[serde(default)]
    truncated: bool,
}

#[derive(Serialize)]
struct DistRequest<'a> {
    tokens: &'a [u32],
}

#[derive(Deserialize)]
struct DistResponse {
    probs: Vec<f64>,
}

/// Response of `GET /info`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerInfo {
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub tokenizer: String,
    pub max_context: usize,
    pub vocab_size: usize,
    /// Token id the server expects between a prepended context and the
    /// document.
    #[serde(default)]
    pub separator: Option<u32>,
}

/// Client for a scorer service speaking the `/score` + `/dist` protocol.
pub struct RemoteScorer {
    client: JsonClient,
    info: ScorerInfo,
    truncated: AtomicU64,
}

impl RemoteScorer {
    /// Connects and reads vocabulary size and context limit from `/info`.
    pub fn connect(config: &RemoteConfig) -> Result<Self, ScoringError> {
        let client = JsonClient::new(config).map_err(|e| map_err(&config.endpoint, e))?;
        let info: ScorerInfo = client
            .get("/info")
            .map_err(|e| map_err(client.endpoint(), e))?;
        Ok(Self::with_info(client, info))
    }

    /// Skips the `/info` handshake.
    pub fn with_declared(
        config: &RemoteConfig,
        vocab_size: usize,
        max_context: usize,
    ) -> Result<Self, ScoringError> {
        let client = JsonClient::new(config).map_err(|e| map_err(&config.endpoint, e))?;
        Ok(Self::with_info(
            client,
            ScorerInfo {
                model: String::new(),
                tokenizer: String::new(),
                max_context,
                vocab_size,
                separator: None,
            },
        ))
    }

    fn with_info(client: JsonClient, info: ScorerInfo) -> Self {
        RemoteScorer {
            client,
            info,
            truncated: AtomicU64::new(0),
        }
    }

    pub fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn check_prefix(&self, len: usize) -> Result<(), ScoringError> {
        if len > self.info.max_context {
            return Err(ScoringError::ContextOverflow {
                len,
                max: self.info.max_context,
            });
        }
        Ok(())
    }
}

fn map_err(endpoint: &str, e: HttpError) -> ScoringError {
    match e {
        HttpError::Unavailable {
            attempts,
            last_error,
        } => ScoringError::ScorerUnavailable {
            endpoint: endpoint.to_string(),
            attempts,
            last_error,
        },
        HttpError::Protocol(m) => ScoringError::Protocol(m),
    }
}

impl Scorer for RemoteScorer {
    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn max_context(&self) -> usize {
        self.info.max_context
    }

    fn next_token_distribution(
        &self,
        prefix: &[u32],
    ) -> Result<NextTokenDistribution, ScoringError> {
        self.check_prefix(prefix.len())?;
        let resp: DistResponse = self
            .client
            .post("/dist", &DistRequest { tokens: prefix })
            .map_err(|e| map_err(self.client.endpoint(), e))?;
        if resp.probs.len() != self.info.vocab_size {
            return Err(ScoringError::Protocol(format!(
                "expected {} probabilities, got {}",
                self.info.vocab_size,
                resp.probs.len()
            )));
        }
        let mass: f64 = resp.probs.iter().sum();
        if (mass - 1.0).abs() > super::MASS_TOLERANCE {
            self.truncated.fetch_add(1, Ordering::Relaxed);
        }
        NextTokenDistribution::renormalized(resp.probs)
    }

    fn entropy_after(&self, prefix: &[u32]) -> Result<f64, ScoringError> {
        // the token at the scored position does not influence its entropy
        let mut tokens = prefix.to_vec();
        tokens.push(0);
        Ok(self.entropies(&tokens, &[prefix.len()])?[0])
    }

    fn entropies(&self, tokens: &[u32], positions: &[usize]) -> Result<Vec<f64>, ScoringError> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(ScoringError::PositionOutOfRange {
                position: p,
                len: tokens.len(),
            });
        }
        let needed = positions.iter().max().copied().unwrap_or(0) + 1;
        self.check_prefix(needed - 1)?;
        let resp: ScoreResponse = self
            .client
            .post(
                "/score",
                &ScoreRequest {
                    tokens: &tokens[..needed],
                    positions,
                },
            )
            .map_err(|e| map_err(self.client.endpoint(), e))?;
        if resp.entropies.len() != positions.len() {
            return Err(ScoringError::Protocol(format!(
                "asked for {} entropies, got {}",
                positions.len(),
                resp.entropies.len()
            )));
        }
        if let Some(h) = resp.entropies.iter().find(|h| !h.is_finite() || **h < 0.0) {
            return Err(ScoringError::Protocol(format!("invalid entropy {h}")));
        }
        if resp.truncated {
            self.truncated.fetch_add(1, Ordering::Relaxed);
        }
        Ok(resp.entropies)
    }

    fn stats(&self) -> ScorerStats {
        ScorerStats {
            truncated_responses: self.truncated.load(Ordering::Relaxed),
        }
    }
}
