//! Run configuration: a TOML document with one key per setting (dotted keys
//! for nested groups) plus `key=value` overrides.
//!
//! ```
//! use dcmcs_core::config::TrainConfig;
//!
//! let cfg = TrainConfig::from_toml_with_overrides(
//!     "seed = 3\nloss.tau2 = 0.2\n",
//!     &["joint_epochs=5", "model.weight_source=\"instance\""],
//! )
//! .unwrap();
//! assert_eq!(cfg.seed, 3);
//! assert_eq!(cfg.loss.tau2, 0.2);
//! assert_eq!(cfg.joint_epochs, 5);
//! ```

use std::fs;
use std::path::Path;

use dcmcs_tensor::AdamConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::Precision;
use crate::error::{Error, Result};
use crate::kmeans::KMeansConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;

/// How final cluster labels are read off a trained model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Row-wise argmax of the fusion view's cluster probabilities.
    #[default]
    Argmax,
    /// k-means on the fused latent codes.
    KmeansFused,
    /// k-means on the fusion view's instance features.
    KmeansInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    /// Score the model every this many epochs (0 disables periodic scoring).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub label_source: LabelSource,
    pub kmeans: KMeansConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            batch_size: 256,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_epochs: 200,
            joint_epochs: 100,
            eval_every: 10,
            eval_batch_size: 256,
            label_source: LabelSource::Argmax,
            kmeans: KMeansConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed must be at most {}, got {}",
                i64::MAX,
                self.seed
            )));
        }
        if self.batch_size < 2 || self.eval_batch_size == 0 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 and eval_batch_size >= 1 (got {}, {})",
                self.batch_size, self.eval_batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if self.kmeans.restarts == 0 || self.kmeans.max_iter == 0 {
            return Err(Error::Config(
                "k-means restarts and max_iter must be >= 1".into(),
            ));
        }
        self.loss.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[] as &[&str])
    }

    /// Parses `text`, applies each `key=value` override in order, then
    /// validates. Values use TOML syntax; anything that does not parse as a
    /// TOML value is taken as a bare string.
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every setting, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `path.to.key = value` inside `table`.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(Error::Config(format!(
            "override `{assignment}` is not of the form key=value"
        )));
    };
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!(
            "override `{assignment}` has an empty key"
        )));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cursor = table;
    for p in parts {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
