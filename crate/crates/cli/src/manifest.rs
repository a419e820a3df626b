//! The run manifest: config snapshot, seeds, per-stage wall times and the
//! SHA-256 of every artifact a stage wrote.

use std::collections::BTreeMap;
use std::path::Path;

use fairstamp::io::{sha256_file, write_json};
use fairstamp::Result;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub world: u64,
    pub model: u64,
    pub train: u64,
    pub edit: u64,
}

impl Seeds {
    pub fn of(config: &PipelineConfig) -> Self {
        Self {
            world: config.world.seed,
            model: config.model.seed,
            train: config.train.seed,
            edit: config.edit.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_ms: f64,
    /// Output-relative path to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// The manifest already in `out`, or a fresh one when absent, unreadable
    /// or written under a different config.
    pub fn open(out: &Path, config: &PipelineConfig) -> Self {
        let fresh = || Self {
            config: config.clone(),
            seeds: Seeds::of(config),
            stages: BTreeMap::new(),
        };
        match std::fs::read(out.join(MANIFEST_FILE)) {
            Ok(bytes) => match serde_json::from_slice::<RunManifest>(&bytes) {
                Ok(m) if &m.config == config => m,
                _ => fresh(),
            },
            Err(_) => fresh(),
        }
    }

    /// Hashes `artifacts` (relative to `out`) and rewrites the manifest.
    pub fn record(&mut self, out: &Path, stage: &str, wall_ms: f64, artifacts: &[String]) -> Result<()> {
        let mut hashed = BTreeMap::new();
        for rel in artifacts {
            hashed.insert(rel.clone(), sha256_file(&out.join(rel))?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                wall_ms,
                artifacts: hashed,
            },
        );
        write_json(&out.join(MANIFEST_FILE), self)
    }
}
