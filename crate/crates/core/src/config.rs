//! Run configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::pac::PacParams;
use crate::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    /// Overrides of the environment's default [`VaeConfig`].
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub vae: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pac: Option<PacParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Replaces the seed of the vae block when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn for_env(id: &str) -> Self {
        RunConfig { env: EnvConfig::named(id), vae: serde_json::Value::Null, pac: None, out: None, seed: None }
    }

    /// Parses and validates every block.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.environment()?;
        self.vae_config()?.validate(&env)?;
        if let Some(p) = &self.pac {
            p.validate()?;
        }
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::from_config(&self.env)
    }

    pub fn vae_config(&self) -> Result<VaeConfig> {
        let mut cfg = VaeConfig::for_env_with(&self.env.id, &self.vae)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
