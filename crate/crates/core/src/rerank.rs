//! Candidate re-ranking: a deterministic top-k selector and an HTTP client
//! that delegates the choice to an external language-model service.
//!
//! Whatever a reranker returns is validated against the closed candidate
//! pool; invalid answers fall back to the deterministic selection.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INSTRUCTION: &str = include_str!("../assets/rerank_instruction.txt");

pub const URL_ENV: &str = "PROMAX_RERANK_URL";
pub const KEY_ENV: &str = "PROMAX_RERANK_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePayload {
    pub id: u32,
    pub profile: String,
    pub score: f64,
}

/// Request body sent to a remote reranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub instruction: String,
    pub user_profile: String,
    pub candidates: Vec<CandidatePayload>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub selected: Vec<i64>,
}

pub trait Reranker: Send + Sync {
    /// Short label recorded in artifact sidecars.
    fn identity(&self) -> String;

    /// Raw selection; validation happens in [`crate::retrieval::rerank`].
    fn select(&self, request: &RerankRequest) -> Result<Vec<i64>>;
}

/// Takes the first `k` candidates of the retrieval ranking.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeterministicReranker;

impl Reranker for DeterministicReranker {
    fn identity(&self) -> String {
        "deterministic".to_string()
    }

    fn select(&self, request: &RerankRequest) -> Result<Vec<i64>> {
        Ok(request
            .candidates
            .iter()
            .take(request.k)
            .map(|c| i64::from(c.id))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    /// Reads endpoint and key from `PROMAX_RERANK_URL` / `PROMAX_RERANK_KEY`,
    /// letting explicit values take precedence.
    pub fn from_env(url: Option<String>, timeout: Duration, max_in_flight: usize) -> Result<Self> {
        let url = url
            .or_else(|| std::env::var(URL_ENV).ok())
            .filter(|u| !u.is_empty())
            .ok_or_else(|| {
                Error::Argument(format!("remote reranker needs an endpoint ({URL_ENV})"))
            })?;
        Ok(Self {
            url,
            api_key: std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout,
            max_in_flight: max_in_flight.max(1),
        })
    }
}

pub struct RemoteReranker {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteReranker {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Rerank(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}

impl Reranker for RemoteReranker {
    fn identity(&self) -> String {
        format!("remote:{}", self.config.url)
    }

    fn select(&self, request: &RerankRequest) -> Result<Vec<i64>> {
        let mut builder = self.client.post(&self.config.url).json(request);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| Error::Rerank(format!("request failed: {e}")))?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::Rerank(format!("endpoint returned {status}")));
        }
        let body: RerankResponse = response
            .json()
            .map_err(|e| Error::Rerank(format!("malformed response: {e}")))?;
        Ok(body.selected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format_field_names() {
        let req = RerankRequest {
            instruction: "pick".into(),
            user_profile: "likes sci-fi".into(),
            candidates: vec![CandidatePayload {
                id: 3,
                profile: "space opera".into(),
                score: 0.5,
            }],
            k: 1,
        };
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "instruction": "pick",
                "user_profile": "likes sci-fi",
                "candidates": [{"id": 3, "profile": "space opera", "score": 0.5}],
                "k": 1
            })
        );
        let resp: RerankResponse = serde_json::from_str(r#"{"selected":[3,-1]}"#).unwrap();
        assert_eq!(resp.selected, vec![3, -1]);
    }

    #[test]
    fn deterministic_takes_prefix() {
        let req = RerankRequest {
            instruction: String::new(),
            user_profile: String::new(),
            candidates: (0..5)
                .map(|id| CandidatePayload {
                    id,
                    profile: String::new(),
                    score: 0.0,
                })
                .collect(),
            k: 2,
        };
        assert_eq!(DeterministicReranker.select(&req).unwrap(), vec![0, 1]);
    }
}
