use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use fggsl_core::dataset::Fingerprint;
use fggsl_core::{DatasetBundle, TrainConfig};
use serde::Serialize;

/// Everything needed to reproduce a run. The timestamp lives here and
/// nowhere else.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub created_unix: u64,
    pub config: TrainConfig,
    pub dataset: DatasetRecord,
    pub seeds: Seeds,
    pub reports: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct DatasetRecord {
    pub name: String,
    pub path: PathBuf,
    pub feature_normalized: bool,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub base: u64,
    pub per_split: Vec<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, bundle: &DatasetBundle, data: &Path, reports: Vec<String>) -> Self {
        let splits = bundle.graph.splits().len();
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: config.clone(),
            dataset: DatasetRecord {
                name: bundle.name.clone(),
                path: data.to_path_buf(),
                feature_normalized: bundle.feature_normalized,
                fingerprint: bundle.fingerprint(),
            },
            seeds: Seeds {
                base: config.seed,
                per_split: (0..splits).map(|i| config.split_seed(i)).collect(),
            },
            reports,
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
