//! Flat `key = value` configuration files with dotted section keys.
//!
//! ```text
//! # comment
//! train.lr = 0.001
//! pca.mode = joint
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "pca.kappa",
    "pca.mode",
    "pca.pre_normalize",
    "retrieval.k_users",
    "retrieval.pool_cap",
    "reranker.mode",
    "reranker.url",
    "reranker.timeout_ms",
    "reranker.max_in_flight",
    "reranker.instruction_path",
    "dist.tau",
    "dist.theta_sim",
    "dist.mode",
    "train.encoder",
    "train.lr",
    "train.batch_size",
    "train.lambda1",
    "train.lambda2",
    "train.dim",
    "train.layers",
    "train.max_epochs",
    "train.patience",
    "train.reg",
    "train.eval_every",
    "split.seed",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got '{content}'"),
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown key '{key}'"),
                });
            }
            let value = value.trim().trim_matches('"');
            if values.insert(key.to_string(), (value.to_string(), line)).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    /// Parsed value of `key`, `None` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| Error::Parse {
                line: *line,
                message: format!("{key}: {e}"),
            }),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), (value.into(), 0));
    }

    /// Canonical `key=value` lines, used for hashing.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .map(|(k, (v, _))| format!("{k}={v}\n"))
            .collect()
    }
}
