//! Run manifests: the effective configuration, seeds and code version of a
//! command, written next to its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use semsr::config::RunConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "effective_config.toml";

pub fn code_version() -> String {
    format!("semsr-cli {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    /// Per-item records (images, grid points), command specific.
    pub items: Vec<serde_json::Value>,
    /// Wall-clock field, excluded from reproducibility comparisons.
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("run".into(), config.seed);
        seeds.insert("sampler".into(), config.sampler.seed);
        Self {
            command: command.into(),
            code_version: code_version(),
            config: config.clone(),
            seeds,
            inputs: BTreeMap::new(),
            items: Vec::new(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(mut self, key: &str, value: impl AsRef<Path>) -> Self {
        self.inputs.insert(key.into(), value.as_ref().display().to_string());
        self
    }

    /// Writes `run_manifest.json` and `effective_config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_toml()?)
            .with_context(|| format!("writing {}", cfg_path.display()))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_run(&self, other: &RunManifest) -> bool {
        Self { created_unix: 0, ..self.clone() } == Self { created_unix: 0, ..other.clone() }
    }
}
