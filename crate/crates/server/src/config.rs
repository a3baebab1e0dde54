//! Service configuration: a TOML file with environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const ENV_CKPT: &str = "PROMPTSEG_CKPT";
pub const ENV_ADDR: &str = "PROMPTSEG_ADDR";
pub const ENV_CACHE_BYTES: &str = "PROMPTSEG_CACHE_BYTES";

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
/// 64 MiB of cached embeddings.
pub const DEFAULT_CACHE_BYTES: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub ckpt: Option<PathBuf>,
    pub addr: String,
    /// Byte budget for the embedding cache.
    pub cache_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { ckpt: None, addr: DEFAULT_ADDR.into(), cache_bytes: DEFAULT_CACHE_BYTES }
    }
}

impl ServiceConfig {
    pub fn from_toml(doc: &str) -> Result<Self, ServiceError> {
        toml::from_str(doc).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads `path` if given (defaults otherwise), then applies the
    /// `PROMPTSEG_*` environment variables.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let doc = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&doc)?
            }
            None => Self::default(),
        };
        cfg.apply_overrides(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        if let Some(v) = lookup(ENV_CKPT) {
            self.ckpt = Some(v.into());
        }
        if let Some(v) = lookup(ENV_ADDR) {
            self.addr = v;
        }
        if let Some(v) = lookup(ENV_CACHE_BYTES) {
            self.cache_bytes =
                v.trim().parse().map_err(|_| ServiceError::Config(format!("{ENV_CACHE_BYTES}: not a byte count: {v:?}")))?;
        }
        Ok(())
    }
}
