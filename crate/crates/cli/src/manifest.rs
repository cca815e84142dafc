//! Run manifest: per-stage input/output hashes for idempotent, checked reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's effective parameters.
    pub params: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

pub enum Plan {
    /// Inputs and parameters unchanged and outputs intact.
    UpToDate,
    Run,
}

impl RunManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("corrupt manifest {}", path.display()))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))
    }

    /// Checks that every input still matches the hash recorded by the stage
    /// that produced it, then decides whether `stage` needs to run.
    pub fn plan(&self, root: &Path, stage: &str, params: &str, inputs: &[PathBuf], force: bool) -> Result<Plan> {
        let mut current = BTreeMap::new();
        for input in inputs {
            if !input.exists() {
                bail!(
                    "missing input {}; run the stage that produces it first",
                    input.display()
                );
            }
            let key = rel(root, input);
            let hash = hash_file(input)?;
            if let Some((producer, recorded)) = self.producer_of(&key) {
                if recorded != &hash && !force {
                    bail!(
                        "{key} changed since stage '{producer}' wrote it; rerun '{producer}' or pass --force"
                    );
                }
            }
            current.insert(key, hash);
        }
        let Some(prev) = self.stages.get(stage) else {
            return Ok(Plan::Run);
        };
        if force || prev.params != sha256_hex(params.as_bytes()) || prev.inputs != current {
            return Ok(Plan::Run);
        }
        for (key, hash) in &prev.outputs {
            let path = root.join(key);
            if !path.exists() || &hash_file(&path)? != hash {
                return Ok(Plan::Run);
            }
        }
        Ok(Plan::UpToDate)
    }

    fn producer_of(&self, key: &str) -> Option<(&str, &String)> {
        self.stages
            .iter()
            .find_map(|(name, rec)| rec.outputs.get(key).map(|h| (name.as_str(), h)))
    }

    pub fn record(
        &mut self,
        root: &Path,
        stage: &str,
        params: &str,
        seed: u64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let mut rec = StageRecord {
            params: sha256_hex(params.as_bytes()),
            seed,
            ..StageRecord::default()
        };
        for p in inputs {
            rec.inputs.insert(rel(root, p), hash_file(p)?);
        }
        for p in outputs {
            rec.outputs.insert(rel(root, p), hash_file(p)?);
        }
        self.stages.insert(stage.to_string(), rec);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn rerun_is_noop_and_tamper_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let a = root.join("a.txt");
        let b = root.join("b.txt");
        fs::write(&a, "x").unwrap();
        let mut m = RunManifest::default();
        fs::write(&b, "y").unwrap();
        m.record(root, "one", "p", 0, &[], std::slice::from_ref(&a)).unwrap();
        m.record(root, "two", "p", 0, std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert!(matches!(m.plan(root, "two", "p", std::slice::from_ref(&a), false).unwrap(), Plan::UpToDate));
        assert!(matches!(m.plan(root, "two", "q", std::slice::from_ref(&a), false).unwrap(), Plan::Run));
        fs::write(&a, "tampered").unwrap();
        assert!(m.plan(root, "two", "p", std::slice::from_ref(&a), false).is_err());
        assert!(matches!(m.plan(root, "two", "p", &[a], true).unwrap(), Plan::Run));
    }
}
