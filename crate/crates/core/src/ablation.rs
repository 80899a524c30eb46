//! Side-by-side training of configuration variants under shared seeds.
//!
//! An arm is one variant or several joined with `+` (`drop-li+drop-lc`).
//! The loss-component table rows are available as the aliases `a` to `e`.
//! Whenever an arm leaves the cluster loss switched off the semantic head has
//! no training signal, so labels fall back to k-means: on the fused latent
//! codes if the instance loss is off too, otherwise on the fusion view's
//! instance features.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use dcmcs_tensor::{Matrix, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{LabelSource, TrainConfig};
use crate::data::{MultiViewDataset, Precision};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::model::{Architecture, DcmcsModel, WeightSource};
use crate::trainer::{pretrain, EpochRecord, Phase, RunTrace, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    DropInstanceLoss,
    DropClusterLoss,
    DropPretrain,
    WithoutPairWeights,
    InstanceWeights,
    SemanticWeightsWithoutFusion,
    InstanceWeightsWithoutFusion,
    KmeansFused,
    KmeansInstance,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::DropInstanceLoss,
        Variant::DropClusterLoss,
        Variant::DropPretrain,
        Variant::WithoutPairWeights,
        Variant::InstanceWeights,
        Variant::SemanticWeightsWithoutFusion,
        Variant::InstanceWeightsWithoutFusion,
        Variant::KmeansFused,
        Variant::KmeansInstance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DropInstanceLoss => "drop-li",
            Variant::DropClusterLoss => "drop-lc",
            Variant::DropPretrain => "drop-pretrain",
            Variant::WithoutPairWeights => "without-rc",
            Variant::InstanceWeights => "rh",
            Variant::SemanticWeightsWithoutFusion => "rc-without-chat",
            Variant::InstanceWeightsWithoutFusion => "rh-without-hhat",
            Variant::KmeansFused => "kmeans-zhat",
            Variant::KmeansInstance => "kmeans-hhat",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::Full => "all losses, semantic pair weights with the fusion view",
            Variant::DropInstanceLoss => "instance-level loss weight set to 0",
            Variant::DropClusterLoss => "cluster-level loss weight set to 0",
            Variant::DropPretrain => "no reconstruction pretraining",
            Variant::WithoutPairWeights => "instance loss without pair weights",
            Variant::InstanceWeights => "pair weights from instance features",
            Variant::SemanticWeightsWithoutFusion => {
                "semantic pair weights without the fusion view"
            }
            Variant::InstanceWeightsWithoutFusion => {
                "instance pair weights without the fusion view"
            }
            Variant::KmeansFused => "labels by k-means on fused latent codes",
            Variant::KmeansInstance => "labels by k-means on fusion instance features",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "with-rc" => return Ok(Variant::Full),
            "r-h" | "rh-with-hhat" => return Ok(Variant::InstanceWeights),
            _ => {}
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))
    }

    fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::DropInstanceLoss => cfg.loss.lambda1 = 0.0,
            Variant::DropClusterLoss => cfg.loss.lambda2 = 0.0,
            Variant::DropPretrain => cfg.pretrain_epochs = 0,
            Variant::WithoutPairWeights => cfg.loss.use_pair_weights = false,
            Variant::InstanceWeights => cfg.model.weight_source = WeightSource::Instance,
            Variant::SemanticWeightsWithoutFusion => {
                cfg.model.weight_source = WeightSource::Semantic;
                cfg.model.weights_include_fusion = false;
            }
            Variant::InstanceWeightsWithoutFusion => {
                cfg.model.weight_source = WeightSource::Instance;
                cfg.model.weights_include_fusion = false;
            }
            Variant::KmeansFused => cfg.label_source = LabelSource::KmeansFused,
            Variant::KmeansInstance => cfg.label_source = LabelSource::KmeansInstance,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One column of the comparison: a named combination of variants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arm {
    pub name: String,
    pub variants: Vec<Variant>,
}

impl Arm {
    /// Parses `full`, `drop-li+drop-lc`, or a table alias `a`..`e`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let expanded = match spec {
            "a" => "drop-li+drop-lc",
            "b" => "drop-lc",
            "c" => "drop-li",
            "d" => "full",
            "e" => "drop-pretrain",
            other => other,
        };
        let variants = expanded
            .split('+')
            .map(|p| Variant::parse(p.trim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: spec.to_string(),
            variants,
        })
    }

    pub fn describe(&self) -> String {
        self.variants
            .iter()
            .map(|v| v.describe())
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// `base` with every variant applied and the label source resolved.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        for v in &self.variants {
            v.apply(&mut cfg);
        }
        if cfg.loss.lambda2 == 0.0 && cfg.label_source == LabelSource::Argmax {
            cfg.label_source = if cfg.loss.lambda1 == 0.0 {
                LabelSource::KmeansFused
            } else {
                LabelSource::KmeansInstance
            };
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub description: String,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub label_source: LabelSource,
    pub runs: Vec<SeedRun>,
    pub median: Scores,
    pub mean: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn summarize(runs: &[SeedRun], f: impl Fn(Vec<f64>) -> f64) -> Scores {
    let pick = |g: fn(&Scores) -> f64| f(runs.iter().map(|r| g(&r.scores)).collect());
    Scores {
        acc: pick(|s| s.acc),
        nmi: pick(|s| s.nmi),
        pur: pick(|s| s.pur),
    }
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("ablation report: {e}")))
    }

    /// Rows are arms; columns are median ACC, NMI and PUR over seeds.
    pub fn render_table(&self) -> String {
        let width = self
            .arms
            .iter()
            .map(|a| a.arm.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "dataset {} ({} seeds: {:?}); median over seeds",
            self.dataset,
            self.seeds.len(),
            self.seeds
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  description",
            "variant", "ACC", "NMI", "PUR"
        );
        for a in &self.arms {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {}",
                a.arm, a.median.acc, a.median.nmi, a.median.pur, a.description
            );
        }
        out
    }
}

/// Training settings that fully determine the pretrained autoencoders.
fn pretrain_key(cfg: &TrainConfig) -> String {
    serde_json::json!({
        "seed": cfg.seed,
        "precision": cfg.precision,
        "batch_size": cfg.batch_size,
        "adam": [cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps],
        "epochs": cfg.pretrain_epochs,
        "hidden": cfg.model.hidden_dims,
        "latent": cfg.model.latent_dim,
        "reduction": cfg.loss.reconstruction,
    })
    .to_string()
}

/// Pretrained autoencoder weights and epoch records, reused across arms.
#[derive(Default)]
pub struct PretrainCache<T> {
    entries: HashMap<String, (Vec<(String, Matrix<T>)>, Vec<EpochRecord>)>,
}

impl<T: Scalar> PretrainCache<T> {
    pub fn new() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    /// Session for `cfg` positioned at the start of joint training.
    ///
    /// Autoencoder weights are drawn before any other parameter, so every
    /// arm sharing [`pretrain_key`] starts joint training from the same
    /// pretrained weights an uninterrupted run would reach.
    pub fn session(&mut self, ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<Session<T>> {
        let arch = Architecture::new(ds.view_dims(), ds.n_clusters(), cfg.model.clone())?;
        let mut model = DcmcsModel::<T>::new(arch, cfg.seed)?;
        if cfg.pretrain_epochs == 0 {
            return Session::with_model(cfg.clone(), model, Phase::Pretrain);
        }
        let key = pretrain_key(cfg);
        if !self.entries.contains_key(&key) {
            let (trained, trace) = pretrain(model.clone(), ds, cfg)?;
            let weights = trained
                .params()
                .iter()
                .filter(|p| p.group.is_autoencoder())
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect();
            self.entries.insert(key.clone(), (weights, trace.records));
        }
        let (weights, records) = &self.entries[&key];
        for (name, value) in weights {
            model
                .param_mut(name)
                .expect("autoencoder layout is shared")
                .value = value.clone();
        }
        let session = Session::with_model(cfg.clone(), model, Phase::Joint)?;
        Ok(session.with_trace(RunTrace {
            records: records.clone(),
        }))
    }
}

fn run_arms<T: Scalar>(
    ds: &MultiViewDataset,
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    on_run: &mut dyn FnMut(&str, u64, &Scores),
) -> Result<Vec<ArmResult>> {
    let mut cache = PretrainCache::<T>::new();
    let mut runs: Vec<Vec<SeedRun>> = vec![Vec::new(); arms.len()];
    for &seed in seeds {
        let seeded = TrainConfig {
            seed,
            ..base.clone()
        };
        for (a, arm) in arms.iter().enumerate() {
            let cfg = arm.config(&seeded);
            let mut session = cache.session(ds, &cfg)?;
            session.run(ds, |_| {})?;
            let scores = session
                .result(ds)?
                .scores
                .ok_or_else(|| Error::Dataset("ablation needs a labelled dataset".into()))?;
            on_run(&arm.name, seed, &scores);
            runs[a].push(SeedRun { seed, scores });
        }
    }
    Ok(arms
        .iter()
        .zip(runs)
        .map(|(arm, runs)| {
            let cfg = arm.config(base);
            ArmResult {
                arm: arm.name.clone(),
                description: arm.describe(),
                pretrain_epochs: cfg.pretrain_epochs,
                joint_epochs: cfg.joint_epochs,
                label_source: cfg.label_source,
                median: summarize(&runs, median),
                mean: summarize(&runs, |xs| xs.iter().sum::<f64>() / xs.len() as f64),
                runs,
            }
        })
        .collect())
}

/// Trains every arm once per seed and tabulates the scores.
///
/// `on_run` sees each finished (arm, seed) pair as it completes.
pub fn run_ablation(
    ds: &MultiViewDataset,
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    mut on_run: impl FnMut(&str, u64, &Scores),
) -> Result<AblationReport> {
    if ds.labels().is_none() {
        return Err(Error::Dataset("ablation needs a labelled dataset".into()));
    }
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one arm and one seed".into(),
        ));
    }
    base.validate()?;
    let results = match base.precision {
        Precision::F32 => run_arms::<f32>(ds, base, arms, seeds, &mut on_run)?,
        Precision::F64 => run_arms::<f64>(ds, base, arms, seeds, &mut on_run)?,
    };
    Ok(AblationReport {
        dataset: ds.name().to_string(),
        dataset_fingerprint: ds.fingerprint(),
        seeds: seeds.to_vec(),
        arms: results,
    })
}
