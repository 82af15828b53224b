//! Optional TOML defaults. Precedence: flags, then the config file, then
//! `ULCP_SEED`, then built-in defaults.

use std::path::Path;

use serde::Deserialize;

use ulcp_core::replay::{ReplayPolicy, DEFAULT_SEED};

use crate::Failure;

pub const SEED_ENV: &str = "ULCP_SEED";

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub policy: Option<String>,
    pub runs: Option<usize>,
    pub dynamic_locking: Option<bool>,
    pub threads: Option<Vec<i64>>,
    pub sizes: Option<Vec<i64>>,
    pub size_param: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input("CONFIG", format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Failure::input("CONFIG", format!("{}: {e}", path.display())))
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64, Failure> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Failure::usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
            }),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    pub fn policy(&self, flag: Option<ReplayPolicy>) -> Result<ReplayPolicy, Failure> {
        match (flag, &self.policy) {
            (Some(p), _) => Ok(p),
            (None, Some(s)) => s
                .parse()
                .map_err(|e: ulcp_core::Error| Failure::input("CONFIG", e.to_string())),
            (None, None) => Ok(ReplayPolicy::ElscS),
        }
    }

    pub fn dynamic_locking(&self, disabled_by_flag: bool) -> bool {
        !disabled_by_flag && self.dynamic_locking.unwrap_or(true)
    }
}
