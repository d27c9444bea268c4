//! HTTP client for remote embedding services.
//!
//! Requests are `POST {"inputs": [...]}` and responses
//! `{"embeddings": [[...], ...]}`. Results are cached as FMAT files keyed by
//! a hash of the endpoint, model name and inputs.

use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{read_fmat, write_fmat, IoError};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    /// Sent as `"model"` in the request body when set.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Retries after the first attempt of each batch.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_backoff_factor")]
    pub backoff_factor: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    32
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_backoff_factor() -> f64 {
    2.0
}
fn default_timeout_ms() -> u64 {
    30_000
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            batch_size: default_batch_size(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_backoff_ms(),
            backoff_factor: default_backoff_factor(),
            timeout_ms: default_timeout_ms(),
            token_env: None,
            cache_dir: None,
        }
    }

    /// Cache key; independent of batching and retry settings.
    pub fn cache_key(&self, inputs: &[String]) -> String {
        let mut h = Sha256::new();
        let doc = serde_json::json!({
            "endpoint": self.endpoint,
            "model": self.model,
            "inputs": inputs,
        });
        h.update(serde_json::to_vec(&doc).expect("serializable"));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no inputs to embed")]
    Empty,
    #[error("batch_size must be >= 1")]
    BatchSize,
    #[error("batch {batch}: HTTP status {status}")]
    Status { batch: usize, status: u16 },
    #[error("batch {batch}: {message}")]
    Transport { batch: usize, message: String },
    #[error("batch {batch}: malformed response: {message}")]
    Decode { batch: usize, message: String },
    #[error("batch {batch}: {got} embeddings for {expected} inputs")]
    Count {
        batch: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch {batch}: embedding dimension {got}, expected {expected}")]
    Shape {
        batch: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch {batch}: non-finite embedding value")]
    NonFinite { batch: usize },
    #[error("token variable {0} is not set")]
    MissingToken(String),
    #[error(transparent)]
    Cache(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FetchStats {
    pub requests: usize,
    pub retries: usize,
    pub cache_hit: bool,
}

#[derive(Serialize)]
struct Request<'a> {
    inputs: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct Response {
    embeddings: Vec<Vec<f64>>,
}

enum Attempt {
    Done(Vec<Vec<f64>>),
    Retry(ProviderError),
    Fail(ProviderError),
}

/// Embeds `inputs` in order, batch by batch.
pub fn fetch_embeddings(
    cfg: &ProviderConfig,
    inputs: &[String],
) -> Result<(Matrix, FetchStats), ProviderError> {
    if inputs.is_empty() {
        return Err(ProviderError::Empty);
    }
    if cfg.batch_size == 0 {
        return Err(ProviderError::BatchSize);
    }
    let cache_path = cfg
        .cache_dir
        .as_ref()
        .map(|d| d.join(format!("{}.fmat", cfg.cache_key(inputs))));
    if let Some(p) = &cache_path {
        if p.exists() {
            let m = read_fmat(p)?;
            if m.rows() == inputs.len() {
                let stats = FetchStats {
                    cache_hit: true,
                    ..FetchStats::default()
                };
                return Ok((m, stats));
            }
        }
    }
    let token = match &cfg.token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| ProviderError::MissingToken(var.clone()))?),
        None => None,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();

    let mut stats = FetchStats::default();
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    for (batch, chunk) in inputs.chunks(cfg.batch_size).enumerate() {
        let body = Request {
            inputs: chunk,
            model: cfg.model.as_deref(),
        };
        let mut attempt = 0u32;
        let rows = loop {
            stats.requests += 1;
            match post(&agent, cfg, token.as_deref(), &body, batch) {
                Attempt::Done(rows) => break rows,
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    if attempt >= cfg.max_retries {
                        return Err(e);
                    }
                    let wait = cfg.initial_backoff_ms as f64 * cfg.backoff_factor.powi(attempt as i32);
                    thread::sleep(Duration::from_millis(wait as u64));
                    attempt += 1;
                    stats.retries += 1;
                }
            }
        };
        if rows.len() != chunk.len() {
            return Err(ProviderError::Count {
                batch,
                expected: chunk.len(),
                got: rows.len(),
            });
        }
        for row in rows {
            let expected = *dim.get_or_insert(row.len());
            if row.len() != expected || expected == 0 {
                return Err(ProviderError::Shape {
                    batch,
                    expected,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ProviderError::NonFinite { batch });
            }
            data.extend(row);
        }
    }
    let m = Matrix::from_vec(inputs.len(), dim.unwrap_or(0), data).expect("rows checked");
    if let Some(p) = &cache_path {
        write_fmat(&m, p)?;
    }
    Ok((m, stats))
}

fn post(
    agent: &ureq::Agent,
    cfg: &ProviderConfig,
    token: Option<&str>,
    body: &Request,
    batch: usize,
) -> Attempt {
    let mut req = agent.post(&cfg.endpoint);
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = match req.send_json(body) {
        Ok(r) => r,
        Err(e) => {
            return Attempt::Retry(ProviderError::Transport {
                batch,
                message: e.to_string(),
            })
        }
    };
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Attempt::Retry(ProviderError::Status { batch, status });
    }
    if !(200..300).contains(&status) {
        return Attempt::Fail(ProviderError::Status { batch, status });
    }
    match resp.body_mut().read_json::<Response>() {
        Ok(r) => Attempt::Done(r.embeddings),
        Err(e) => Attempt::Fail(ProviderError::Decode {
            batch,
            message: e.to_string(),
        }),
    }
}
