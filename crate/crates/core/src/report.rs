//! Serialized run outputs: the versioned metrics document and the run
//! manifest.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{LabelSource, TrainConfig};
use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::metrics::{Scores, NMI_NORMALIZATION};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub n_samples: usize,
    pub n_clusters: usize,
    pub seed: u64,
    pub label_source: LabelSource,
    pub nmi_normalization: String,
    /// `None` when the dataset carries no labels.
    pub metrics: Option<Scores>,
}

impl MetricsReport {
    pub fn new(ds: &MultiViewDataset, cfg: &TrainConfig, metrics: Option<Scores>) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            dataset: ds.name().to_string(),
            dataset_fingerprint: ds.fingerprint(),
            n_samples: ds.n_samples(),
            n_clusters: ds.n_clusters(),
            seed: cfg.seed,
            label_source: cfg.label_source,
            nmi_normalization: NMI_NORMALIZATION.to_string(),
            metrics,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("metrics json: {e}")))?;
        if r.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "metrics schema v{} is not supported (expected v{METRICS_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: TrainConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(ds: &MultiViewDataset, cfg: &TrainConfig, started_unix: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            dataset: ds.name().to_string(),
            dataset_fingerprint: ds.fingerprint(),
            started_unix,
            finished_unix: unix_now(),
            config: cfg.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("run manifest: {e}")))?;
        m.config.validate()?;
        Ok(m)
    }

    /// Errors unless `ds` is the dataset this manifest was recorded on.
    pub fn check_dataset(&self, ds: &MultiViewDataset) -> Result<()> {
        let fp = ds.fingerprint();
        if fp != self.dataset_fingerprint {
            return Err(Error::Dataset(format!(
                "fingerprint {fp} differs from the manifest's {}",
                self.dataset_fingerprint
            )));
        }
        Ok(())
    }
}
