//! `manifest.json`: what produced each artifact in a work directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use evoedit::pipeline::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub command: String,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Short form of `input_hash`.
    pub run_id: String,
    /// SHA-256 of the config as flat TOML.
    pub input_hash: String,
    pub config: TrainConfig,
    pub artifacts: BTreeMap<String, Artifact>,
    pub phases: Vec<Phase>,
    #[serde(skip)]
    dir: PathBuf,
    #[serde(skip)]
    started: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Artifact {
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

impl RunManifest {
    /// Loads `dir/manifest.json`, starting over if it belongs to a different config.
    pub fn open(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let input_hash = hex::encode(Sha256::digest(cfg.to_toml().as_bytes()));
        let path = dir.join("manifest.json");
        let existing = std::fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str::<RunManifest>(&s).ok())
            .filter(|m| m.input_hash == input_hash);
        let mut m = existing.unwrap_or_else(|| RunManifest {
            run_id: input_hash[..12].to_string(),
            input_hash: input_hash.clone(),
            config: cfg.clone(),
            artifacts: BTreeMap::new(),
            phases: Vec::new(),
            dir: PathBuf::new(),
            started: 0,
        });
        m.dir = dir.to_path_buf();
        m.started = now();
        Ok(m)
    }

    /// Hashes the named files (relative to the work directory) and saves.
    pub fn record(&mut self, command: &str, names: &[&str]) -> Result<()> {
        for name in names {
            self.artifacts.insert(name.to_string(), file_sha256(&self.dir.join(name))?);
        }
        self.phases.push(Phase {
            command: command.to_string(),
            artifacts: names.iter().map(|s| s.to_string()).collect(),
            started_unix: self.started,
            finished_unix: now(),
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
