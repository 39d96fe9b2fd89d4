use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sdrformer::sdrformer::SdrFormerConfig;
use sdrformer::trainer::TrainConfig;

/// One JSON file describing a run. Flags given on the command line win.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: SdrFormerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset manifest path, relative to the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data = cfg.data.map(|d| if d.is_relative() { base.join(d) } else { d });
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Flag, then config file, then `SDRF_SEED`, then the training default.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var("SDRF_SEED") {
            Ok(v) => v.trim().parse().with_context(|| format!("SDRF_SEED={v:?} is not an unsigned integer")),
            Err(_) => Ok(self.train.seed),
        }
    }
}
