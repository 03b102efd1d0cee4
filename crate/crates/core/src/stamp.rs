//! Provenance attached to every output artifact.

use serde::{Deserialize, Serialize};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Stamp {
            config_hash: config_hash.into(),
            seed,
            version: CODE_VERSION.to_string(),
        }
    }

    /// A `#`-prefixed first line for CSV files.
    pub fn csv_comment(&self) -> String {
        format!(
            "# config_hash={} seed={} version={}",
            self.config_hash, self.seed, self.version
        )
    }
}
