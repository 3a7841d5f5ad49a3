//! Run manifests: the complete effective configuration plus provenance,
//! written next to every output file. Re-running a command from its
//! manifest reproduces the outputs bit for bit (timestamps live only in
//! the manifest, never in reports).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RNG_ALGORITHM;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    /// Full effective configuration, defaults included.
    pub config: BTreeMap<String, String>,
    pub rng_algorithm: String,
    pub seed: u64,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64) -> Self {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: BTreeMap::new(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed,
            started_at_unix_ms: now_ms(),
            finished_at_unix_ms: 0,
        }
    }

    /// Stamps the end time and the final resolved config, then writes.
    pub fn finish(mut self, config: BTreeMap<String, String>, path: &Path) -> Result<()> {
        self.config = config;
        self.finished_at_unix_ms = now_ms();
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::config(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut cfg = BTreeMap::new();
        cfg.insert("train.method".to_string(), "erm".to_string());
        let m = RunManifest::begin("train", 7);
        m.finish(cfg, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "train");
        assert_eq!(back.seed, 7);
        assert_eq!(back.rng_algorithm, "chacha8");
        assert_eq!(back.config.get("train.method").unwrap(), "erm");
    }
}
