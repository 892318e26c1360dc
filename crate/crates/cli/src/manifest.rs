//! Run manifests: a `key=value` record written next to every artifact.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use rwsa_core::config::RunConfig;

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn path_for(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub struct Manifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: String,
    pub weights_hash: String,
    pub seed: u64,
    pub created_unix: u64,
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, config_path: Option<&Path>, command: &str, weights: &[u8]) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: cfg.to_text(),
            weights_hash: content_hash(weights),
            seed: cfg.train.seed,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            extra: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "command={}\nconfig_path={}\nweights_sha256={}\nseed={}\ncreated_unix={}\n",
            self.command,
            self.config_path.as_deref().unwrap_or("<defaults>"),
            self.weights_hash,
            self.seed,
            self.created_unix
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        for line in self.config.lines() {
            s.push_str(&format!("config.{line}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
