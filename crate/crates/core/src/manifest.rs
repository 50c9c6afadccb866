//! Reproducibility record written next to run outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::StageReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hex SHA-256 of the exact config file bytes.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub reports: Vec<StageReport>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config_bytes: &[u8], seed: Option<u64>, reports: Vec<StageReport>, outputs: Vec<String>) -> Self {
        Self {
            config_digest: config_digest(config_bytes),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            reports,
            outputs,
        }
    }
}

pub fn config_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            config_digest(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    proptest! {
        #[test]
        fn digest_tracks_bytes(a in proptest::collection::vec(any::<u8>(), 0..64), b in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(config_digest(&a) == config_digest(&b), a == b);
        }
    }
}
