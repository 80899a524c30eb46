//! Reconstruction pretraining, joint optimization, label extraction and the
//! per-epoch trace.

use std::time::Instant;

use dcmcs_tensor::{Adam, AdamConfig, Graph, Matrix, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::config::{LabelSource, TrainConfig};
use crate::data::{batch_iter, MultiViewDataset};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::losses::{reconstruction_loss, total_loss, LossBreakdown};
use crate::metrics::{score, Scores};
use crate::model::{Architecture, DcmcsModel, OutputProjection, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Joint,
    Done,
}

/// Whether `group` is optimized during `phase`.
pub fn trains(phase: Phase, group: ParamGroup, cfg: &TrainConfig) -> bool {
    match phase {
        Phase::Pretrain => group.is_autoencoder(),
        Phase::Joint => {
            group != ParamGroup::AttentionOutput
                || cfg.model.output_projection == OutputProjection::Trained
        }
        Phase::Done => false,
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across both phases.
    pub epoch: usize,
    pub phase: Phase,
    /// Batch means of each term; `floor_hits` is summed over batches.
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub fusion_weights: Vec<f64>,
    pub seconds: f64,
    /// Argmax-label scores, on scoring epochs of labelled datasets.
    pub scores: Option<Scores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<EpochRecord>,
}

impl RunTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("epoch log: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.records.iter_mut().for_each(|r| r.seconds = 0.0);
        t
    }
}

/// Row-sum and simplex diagnostics of one joint-phase step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureCheck {
    /// Largest `|row sum − 1|` over every `C^v`, `Ĉ` and the pair weights.
    pub max_row_sum_error: f64,
    /// Smallest entry of those matrices.
    pub min_probability: f64,
    /// `|Σ w − 1|` of the fusion weights after the update.
    pub fusion_sum_error: f64,
    /// Smallest fusion weight after the update.
    pub min_fusion_weight: f64,
}

impl StructureCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_row_sum_error <= tol
            && self.min_probability > 0.0
            && self.fusion_sum_error <= tol
            && self.min_fusion_weight > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub structure: Option<StructureCheck>,
}

fn row_stats<T: Scalar>(m: &Matrix<T>, worst: &mut f64, min: &mut f64) {
    for r in 0..m.rows() {
        let row = m.row(r);
        let s: f64 = row.iter().map(|x| x.to_f64_lossy()).sum();
        *worst = worst.max((s - 1.0).abs());
        for x in row {
            *min = min.min(x.to_f64_lossy());
        }
    }
}

/// Training state: the model, the current phase and its optimizer.
///
/// Each phase builds a fresh Adam over exactly the groups it trains.
#[derive(Clone, Debug)]
pub struct Session<T: Scalar> {
    cfg: TrainConfig,
    model: DcmcsModel<T>,
    phase: Phase,
    phase_epoch: usize,
    optimizer: Adam<T>,
    trace: RunTrace,
}

fn check_precision<T: Scalar>(cfg: &TrainConfig) -> Result<()> {
    if T::BYTES != cfg.precision.bytes() {
        return Err(Error::Config(format!(
            "session scalar is {}-bit but the config asks for {}-bit",
            T::BYTES * 8,
            cfg.precision
        )));
    }
    Ok(())
}

/// Errors unless `ds` has the views and cluster count `arch` was built for.
pub fn check_compatible(arch: &Architecture, ds: &MultiViewDataset) -> Result<()> {
    if ds.view_dims() != arch.view_dims || ds.n_clusters() != arch.n_clusters {
        return Err(Error::Shape(format!(
            "dataset has view dims {:?} and K = {}, model expects {:?} and K = {}",
            ds.view_dims(),
            ds.n_clusters(),
            arch.view_dims,
            arch.n_clusters
        )));
    }
    Ok(())
}

impl<T: Scalar> Session<T> {
    /// Fresh model initialized from `cfg.seed`, positioned at pretraining.
    pub fn new(cfg: TrainConfig, ds: &MultiViewDataset) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(ds.view_dims(), ds.n_clusters(), cfg.model.clone())?;
        let model = DcmcsModel::new(arch, cfg.seed)?;
        Self::with_model(cfg, model, Phase::Pretrain)
    }

    /// Wraps an existing model, starting at `phase`. Phases with a zero epoch
    /// budget are skipped.
    pub fn with_model(cfg: TrainConfig, model: DcmcsModel<T>, phase: Phase) -> Result<Self> {
        cfg.validate()?;
        check_precision::<T>(&cfg)?;
        if model.architecture().model != cfg.model {
            return Err(Error::Config(
                "model architecture does not match the config's model section".into(),
            ));
        }
        let mut s = Self {
            optimizer: Adam::new(AdamConfig::default(), []),
            cfg,
            model,
            phase,
            phase_epoch: 0,
            trace: RunTrace::default(),
        };
        s.enter(phase);
        Ok(s)
    }

    /// Reassembles a session from checkpointed parts.
    pub fn from_parts(
        cfg: TrainConfig,
        model: DcmcsModel<T>,
        phase: Phase,
        phase_epoch: usize,
        optimizer: Adam<T>,
        trace: RunTrace,
    ) -> Result<Self> {
        cfg.validate()?;
        check_precision::<T>(&cfg)?;
        let s = Self {
            cfg,
            model,
            phase,
            phase_epoch,
            optimizer,
            trace,
        };
        if s.optimizer.first_moments().len() != s.trainable().len() {
            return Err(Error::Config(
                "optimizer state does not match the phase's parameter groups".into(),
            ));
        }
        Ok(s)
    }

    /// Replaces the epoch log, e.g. with records of epochs run elsewhere.
    pub fn with_trace(mut self, trace: RunTrace) -> Self {
        self.trace = trace;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DcmcsModel<T> {
        &self.model
    }

    pub fn into_model(self) -> DcmcsModel<T> {
        self.model
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Epochs completed in the current phase.
    pub fn phase_epoch(&self) -> usize {
        self.phase_epoch
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.optimizer
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    fn budget(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.cfg.pretrain_epochs,
            Phase::Joint => self.cfg.joint_epochs,
            Phase::Done => 0,
        }
    }

    /// Parameter indices optimized in the current phase.
    pub fn trainable(&self) -> Vec<usize> {
        self.model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| trains(self.phase, p.group, &self.cfg))
            .map(|(i, _)| i)
            .collect()
    }

    fn enter(&mut self, mut phase: Phase) {
        while phase != Phase::Done && self.budget(phase) == 0 {
            phase = match phase {
                Phase::Pretrain => Phase::Joint,
                _ => Phase::Done,
            };
        }
        self.phase = phase;
        self.phase_epoch = 0;
        let shapes: Vec<_> = self
            .trainable()
            .into_iter()
            .map(|i| self.model.params()[i].value.shape())
            .collect();
        self.optimizer = Adam::new(self.cfg.adam(), shapes);
    }

    /// Zero-based epoch index across both phases; selects the batch order.
    fn global_epoch(&self) -> usize {
        match self.phase {
            Phase::Pretrain => self.phase_epoch,
            _ => self.cfg.pretrain_epochs + self.phase_epoch,
        }
    }

    /// One optimizer update on the rows `indices`.
    pub fn train_step(&mut self, ds: &MultiViewDataset, indices: &[usize]) -> Result<StepReport> {
        if self.phase == Phase::Done {
            return Err(Error::Config("training already finished".into()));
        }
        check_compatible(self.model.architecture(), ds)?;
        let batch = ds.batch::<T>(indices);
        let mut g = Graph::new();
        let phase = self.phase;
        let cfg = &self.cfg;
        let bound = self.model.bind(&mut g, |grp| trains(phase, grp, cfg));
        let (loss, total, mut structure): (LossBreakdown, Var, Option<StructureCheck>) =
            if phase == Phase::Pretrain {
                let (inputs, _, rec) = self.model.forward_autoencoders(&mut g, &bound, &batch)?;
                let l = reconstruction_loss(&mut g, &inputs, &rec, cfg.loss.reconstruction)?;
                let v = g.value(l).item().to_f64_lossy();
                let b = LossBreakdown {
                    l_con: v,
                    total: v,
                    ..Default::default()
                };
                (b, l, None)
            } else {
                let out = self.model.forward(&mut g, &bound, &batch)?;
                let terms = total_loss(&mut g, &out, &cfg.loss)?;
                let mut worst = 0.0f64;
                let mut min = f64::INFINITY;
                for &c in out.c.iter().chain([&out.c_hat, &out.pair_weights]) {
                    row_stats(g.value(c), &mut worst, &mut min);
                }
                let check = StructureCheck {
                    max_row_sum_error: worst,
                    min_probability: min,
                    ..Default::default()
                };
                (terms.values(&g), terms.total, Some(check))
            };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "{phase:?} epoch {} loss",
                self.phase_epoch + 1
            )));
        }
        g.backward(total)?;
        let idx = self.trainable();
        let grads: Vec<Option<&Matrix<T>>> = idx.iter().map(|&i| g.grad(bound.vars()[i])).collect();
        let mut params: Vec<&mut Matrix<T>> = self
            .model
            .params_mut()
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| idx.binary_search(i).is_ok())
            .map(|(_, p)| &mut p.value)
            .collect();
        self.optimizer.step(&mut params, &grads)?;
        if let Some(s) = structure.as_mut() {
            let w = self.model.fusion_weights();
            s.fusion_sum_error = (w.iter().sum::<f64>() - 1.0).abs();
            s.min_fusion_weight = w.iter().copied().fold(f64::INFINITY, f64::min);
        }
        Ok(StepReport { loss, structure })
    }

    /// Trains one epoch; returns `None` once every phase is complete.
    pub fn run_epoch(&mut self, ds: &MultiViewDataset) -> Result<Option<&EpochRecord>> {
        if self.phase == Phase::Done {
            return Ok(None);
        }
        check_compatible(self.model.architecture(), ds)?;
        let start = Instant::now();
        let batches = batch_iter(
            ds.n_samples(),
            self.cfg.batch_size,
            self.cfg.seed,
            self.global_epoch() as u64,
        )?;
        let mut sum = LossBreakdown::default();
        for b in &batches {
            let r = self.train_step(ds, b.as_slice())?.loss;
            sum.l_con += r.l_con;
            sum.l_i += r.l_i;
            sum.l_c += r.l_c;
            sum.entropy += r.entropy;
            sum.total += r.total;
            sum.floor_hits += r.floor_hits;
        }
        let nb = batches.len() as f64;
        let loss = LossBreakdown {
            l_con: sum.l_con / nb,
            l_i: sum.l_i / nb,
            l_c: sum.l_c / nb,
            entropy: sum.entropy / nb,
            total: sum.total / nb,
            floor_hits: sum.floor_hits,
        };
        let phase = self.phase;
        let epoch = self.global_epoch() + 1;
        self.phase_epoch += 1;
        let last = self.phase_epoch == self.budget(phase);
        let every = self.cfg.eval_every;
        let due = last || (every > 0 && self.phase_epoch % every == 0);
        let scores = match ds.labels() {
            Some(truth) if due => {
                let pred = predict_labels(&self.model, ds, self.cfg.eval_batch_size)?;
                Some(score(&pred, truth)?)
            }
            _ => None,
        };
        self.trace.records.push(EpochRecord {
            epoch,
            phase,
            loss,
            fusion_weights: self.model.fusion_weights(),
            seconds: start.elapsed().as_secs_f64(),
            scores,
        });
        if last {
            let next = match phase {
                Phase::Pretrain => Phase::Joint,
                _ => Phase::Done,
            };
            self.enter(next);
        }
        Ok(self.trace.records.last())
    }

    /// Runs every remaining epoch, passing each record to `on_epoch`.
    pub fn run(
        &mut self,
        ds: &MultiViewDataset,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while let Some(r) = self.run_epoch(ds)? {
            on_epoch(r);
        }
        Ok(())
    }

    /// Final labels (by the configured label source) and their scores.
    pub fn result(&self, ds: &MultiViewDataset) -> Result<ClusteringResult> {
        cluster(&self.model, ds, &self.cfg)
    }
}

/// Runs only the reconstruction phase on `model`.
pub fn pretrain<T: Scalar>(
    model: DcmcsModel<T>,
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
) -> Result<(DcmcsModel<T>, RunTrace)> {
    check_compatible(model.architecture(), ds)?;
    let cfg = TrainConfig {
        joint_epochs: 0,
        ..cfg.clone()
    };
    let mut s = Session::with_model(cfg, model, Phase::Pretrain)?;
    s.run(ds, |_| {})?;
    let trace = s.trace.clone();
    Ok((s.into_model(), trace))
}

/// Runs only the joint phase on `model` (pretrained or not).
pub fn train_joint<T: Scalar>(
    model: DcmcsModel<T>,
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
) -> Result<(DcmcsModel<T>, RunTrace)> {
    check_compatible(model.architecture(), ds)?;
    let mut s = Session::with_model(cfg.clone(), model, Phase::Joint)?;
    s.run(ds, |_| {})?;
    let trace = s.trace.clone();
    Ok((s.into_model(), trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    pub scores: Option<Scores>,
}

/// Fusion-view outputs for every sample, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub z_hat: Matrix<f64>,
    pub c_hat: Matrix<f64>,
    pub h_hat: Matrix<f64>,
}

fn stack_rows(parts: &[Matrix<f64>]) -> Matrix<f64> {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Matrix::rows).sum();
    let data = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Matrix::from_vec(rows, cols, data).expect("consistent widths")
}

/// Forward pass without gradients over consecutive chunks of `batch_size`.
pub fn embed<T: Scalar>(
    model: &DcmcsModel<T>,
    ds: &MultiViewDataset,
    batch_size: usize,
) -> Result<Embedding> {
    check_compatible(model.architecture(), ds)?;
    let n = ds.n_samples();
    let step = batch_size.max(1);
    let fusion_head = model.architecture().head_index(None);
    let (mut zs, mut cs, mut hs) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..n).step_by(step) {
        let idx: Vec<usize> = (start..(start + step).min(n)).collect();
        let batch = ds.batch::<T>(&idx);
        let mut g = Graph::new();
        let b = model.bind(&mut g, |_| false);
        let (_, z, _) = model.forward_autoencoders(&mut g, &b, &batch)?;
        let (z_hat, _) = model.fuse(&mut g, &b, &z)?;
        let c_hat = model.semantic_features(&mut g, &b, fusion_head, z_hat)?;
        let h_hat = model.instance_features(&mut g, &b, fusion_head, z_hat)?;
        zs.push(g.value(z_hat).cast());
        cs.push(g.value(c_hat).cast());
        hs.push(g.value(h_hat).cast());
    }
    Ok(Embedding {
        z_hat: stack_rows(&zs),
        c_hat: stack_rows(&cs),
        h_hat: stack_rows(&hs),
    })
}

/// Index of each row's largest entry; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix<f64>) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels<T: Scalar>(
    model: &DcmcsModel<T>,
    ds: &MultiViewDataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&embed(model, ds, batch_size)?.c_hat))
}

/// Labels by `cfg.label_source`, scored when `ds` carries ground truth.
pub fn cluster<T: Scalar>(
    model: &DcmcsModel<T>,
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
) -> Result<ClusteringResult> {
    let e = embed(model, ds, cfg.eval_batch_size)?;
    let k = ds.n_clusters();
    let labels = match cfg.label_source {
        LabelSource::Argmax => argmax_rows(&e.c_hat),
        LabelSource::KmeansFused => kmeans(&e.z_hat, k, &cfg.kmeans, cfg.seed)?.labels,
        LabelSource::KmeansInstance => kmeans(&e.h_hat, k, &cfg.kmeans, cfg.seed)?.labels,
    };
    let scores = ds.labels().map(|t| score(&labels, t)).transpose()?;
    Ok(ClusteringResult { labels, scores })
}

/// Complete run: fresh model, pretraining, joint training, final labels.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: DcmcsModel<T>,
    pub trace: RunTrace,
    pub result: ClusteringResult,
}

pub fn train<T: Scalar>(ds: &MultiViewDataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut s = Session::<T>::new(cfg.clone(), ds)?;
    s.run(ds, |_| {})?;
    let result = s.result(ds)?;
    Ok(TrainOutcome {
        trace: s.trace.clone(),
        model: s.into_model(),
        result,
    })
}

/// Reconstruction loss of `model` over the whole dataset, without gradients.
pub fn dataset_reconstruction_loss<T: Scalar>(
    model: &DcmcsModel<T>,
    ds: &MultiViewDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    check_compatible(model.architecture(), ds)?;
    let n = ds.n_samples();
    let step = cfg.eval_batch_size.max(1);
    let mut total = 0.0;
    for start in (0..n).step_by(step) {
        let idx: Vec<usize> = (start..(start + step).min(n)).collect();
        let batch = ds.batch::<T>(&idx);
        let mut g = Graph::new();
        let b = model.bind(&mut g, |_| false);
        let (x, _, rec) = model.forward_autoencoders(&mut g, &b, &batch)?;
        let l = reconstruction_loss(&mut g, &x, &rec, crate::losses::Reduction::Sum)?;
        total += g.value(l).item().to_f64_lossy();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_lowest_index() {
        let m = Matrix::from_rows(&[
            vec![0.1, 0.2, 0.7],
            vec![0.4, 0.1, 0.1],
            vec![0.3, 0.2, 0.3],
        ])
        .unwrap();
        assert_eq!(argmax_rows(&m), vec![2, 0, 0]);
        let tie = Matrix::from_rows(&[vec![0.4, 0.1, 0.1, 0.4]]).unwrap();
        assert_eq!(argmax_rows(&tie), vec![0]);
    }

    #[test]
    fn phase_groups() {
        let cfg = TrainConfig::default();
        assert!(trains(Phase::Pretrain, ParamGroup::Encoder, &cfg));
        assert!(!trains(Phase::Pretrain, ParamGroup::SemanticHead, &cfg));
        assert!(trains(Phase::Joint, ParamGroup::AttentionQuery, &cfg));
        assert!(!trains(Phase::Joint, ParamGroup::AttentionOutput, &cfg));
        let mut with_o = cfg.clone();
        with_o.model.output_projection = OutputProjection::Trained;
        assert!(trains(Phase::Joint, ParamGroup::AttentionOutput, &with_o));
    }
}
