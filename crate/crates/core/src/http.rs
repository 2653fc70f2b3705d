//! Blocking JSON-over-HTTP client shared by the remote scorer and embedder.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: String::new(),
            timeout_ms: 30_000,
            retries: 3,
            max_in_flight: 8,
        }
    }
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub(crate) enum HttpError {
    /// Transport failure or 5xx on every attempt.
    Unavailable { attempts: u32, last_error: String },
    /// 4xx or an unparseable body; retrying will not help.
    Protocol(String),
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub(crate) struct JsonClient {
    base: String,
    client: reqwest::blocking::Client,
    retries: u32,
    permits: Permits,
}

impl JsonClient {
    pub(crate) fn new(config: &RemoteConfig) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| HttpError::Protocol(e.to_string()))?;
        Ok(JsonClient {
            base: config.endpoint.trim_end_matches('/').to_string(),
            client,
            retries: config.retries,
            permits: Permits {
                free: Mutex::new(config.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        })
    }

    pub(crate) fn endpoint(&self) -> &str {
        &self.base
    }

    pub(crate) fn get<Resp: DeserializeOwned>(&self, path: &str) -> Result<Resp, HttpError> {
        self.send(|| self.client.get(format!("{}{}", self.base, path)))
    }

    pub(crate) fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, HttpError> {
        self.send(|| self.client.post(format!("{}{}", self.base, path)).json(body))
    }

    fn send<Resp: DeserializeOwned>(
        &self,
        request: impl Fn() -> reqwest::blocking::RequestBuilder,
    ) -> Result<Resp, HttpError> {
        let _permit = self.permits.acquire();
        let attempts = self.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            match request().send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<Resp>()
                        .map_err(|e| HttpError::Protocol(format!("bad response body: {e}")));
                }
                Ok(resp) if resp.status().is_client_error() => {
                    let status = resp.status();
                    let body = resp.text().unwrap_or_default();
                    return Err(HttpError::Protocol(format!("{status}: {body}")));
                }
                Ok(resp) => last_error = format!("status {}", resp.status()),
                Err(e) => last_error = e.to_string(),
            }
            log::debug!("{} attempt {} failed: {last_error}", self.base, attempt + 1);
        }
        Err(HttpError::Unavailable {
            attempts,
            last_error,
        })
    }
}
