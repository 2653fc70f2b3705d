use serde::{Deserialize, Serialize};

use super::{CorpusError, Tokenizer};
use crate::http::{HttpError, JsonClient, RemoteConfig};
use crate::scoring::ScorerInfo;

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<u32>,
    offsets: Vec<(usize, usize)>,
}

/// Tokenizer served by the scorer itself through `POST /tokenize`, so ids
/// always match the remote model's vocabulary.
pub struct RemoteTokenizer {
    client: JsonClient,
    info: ScorerInfo,
}

impl RemoteTokenizer {
    pub fn connect(config: &RemoteConfig) -> Result<Self, CorpusError> {
        let client = JsonClient::new(config).map_err(|e| map_err(&config.endpoint, e))?;
        let info: ScorerInfo = client
            .get("/info")
            .map_err(|e| map_err(client.endpoint(), e))?;
        Ok(RemoteTokenizer { client, info })
    }

    /// Tokenizer identity published by the server.
    pub fn identifier(&self) -> &str {
        &self.info.tokenizer
    }
}

fn map_err(endpoint: &str, e: HttpError) -> CorpusError {
    match e {
        HttpError::Unavailable {
            attempts,
            last_error,
        } => CorpusError::TokenizerUnavailable {
            endpoint: endpoint.to_string(),
            attempts,
            last_error,
        },
        HttpError::Protocol(m) => CorpusError::TokenizerProtocol(m),
    }
}

impl Tokenizer for RemoteTokenizer {
    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn encode(&self, text: &str) -> Result<(Vec<u32>, Vec<(usize, usize)>), CorpusError> {
        let resp: TokenizeResponse = self
            .client
            .post("/tokenize", &TokenizeRequest { text })
            .map_err(|e| map_err(self.client.endpoint(), e))?;
        if resp.tokens.len() != resp.offsets.len() {
            return Err(CorpusError::TokenizerProtocol(format!(
                "{} tokens but {} offsets",
                resp.tokens.len(),
                resp.offsets.len()
            )));
        }
        let mut last = 0;
        for &(s, e) in &resp.offsets {
            if s > e || e > text.len() || s < last || !text.is_char_boundary(s) || !text.is_char_boundary(e) {
                return Err(CorpusError::TokenizerProtocol(format!(
                    "offset ({s}, {e}) is not a valid span of the text"
                )));
            }
            last = s;
        }
        if let Some(&t) = resp.tokens.iter().find(|&&t| t as usize >= self.info.vocab_size) {
            return Err(CorpusError::TokenizerProtocol(format!(
                "token {t} outside vocabulary of {}",
                self.info.vocab_size
            )));
        }
        Ok((resp.tokens, resp.offsets))
    }

    fn separator(&self) -> Option<u32> {
        self.info.separator
    }
}
