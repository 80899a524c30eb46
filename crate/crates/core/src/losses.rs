//! Reconstruction, cluster-level and pair-weighted instance-level contrastive
//! losses, the cluster-usage entropy, a plain InfoNCE baseline and the
//! weighted total. All functions record onto a [`Graph`] and return scalar
//! tensors.

use dcmcs_tensor::{Graph, Matrix, Scalar, Var, EPS_NORM};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardOutputs;

/// How the reconstruction term is reduced over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Sum of squared errors over views, samples and features.
    #[default]
    Sum,
    /// The sum divided by the batch size.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Floor applied to contrastive denominators before the log.
    pub eps_den: f64,
    /// When false the instance loss runs with `R ≡ 0`.
    pub use_pair_weights: bool,
    pub entropy_on: bool,
    /// Keep the positive pair's exponent unweighted (`R_ii` treated as 0).
    pub exclude_positive: bool,
    pub reconstruction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 1.0,
            tau2: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            eps_den: 1e-8,
            use_pair_weights: true,
            entropy_on: true,
            exclude_positive: false,
            reconstruction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau1 > 0.0
            && self.tau2 > 0.0
            && self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.eps_den > 0.0
            && [
                self.tau1,
                self.tau2,
                self.lambda1,
                self.lambda2,
                self.eps_den,
            ]
            .iter()
            .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss settings out of range: tau1={}, tau2={}, lambda1={}, lambda2={}, eps_den={}",
                self.tau1, self.tau2, self.lambda1, self.lambda2, self.eps_den
            )))
        }
    }
}

/// Scalar values of one evaluation of the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_i: f64,
    pub l_c: f64,
    pub entropy: f64,
    pub total: f64,
    /// Denominator entries raised to `eps_den`.
    pub floor_hits: usize,
}

/// Differentiable terms of the total loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_con: Var,
    pub l_i: Var,
    pub l_c: Var,
    pub entropy: Var,
    pub total: Var,
    pub floor_hits: usize,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let f = |v: Var| g.value(v).item().to_f64_lossy();
        LossBreakdown {
            l_con: f(self.l_con),
            l_i: f(self.l_i),
            l_c: f(self.l_c),
            entropy: f(self.entropy),
            total: f(self.total),
            floor_hits: self.floor_hits,
        }
    }
}

fn t<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

fn add_all<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &x in &terms[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// `Σ_v ‖X^v − X̃^v‖²`, optionally divided by the batch size.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &[Var],
    reconstructions: &[Var],
    reduction: Reduction,
) -> Result<Var> {
    if inputs.is_empty() || inputs.len() != reconstructions.len() {
        return Err(Error::Shape(format!(
            "{} inputs against {} reconstructions",
            inputs.len(),
            reconstructions.len()
        )));
    }
    let mut terms = Vec::with_capacity(inputs.len());
    for (&x, &r) in inputs.iter().zip(reconstructions) {
        let d = g.sub(x, r)?;
        let sq = g.mul(d, d)?;
        terms.push(g.sum(sq));
    }
    let total = add_all(g, &terms)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => {
            let n = g.shape(inputs[0]).0;
            g.scale(total, t(1.0 / n as f64))
        }
    })
}

/// `⟨a, b⟩ / (max(‖a‖, ε) max(‖b‖, ε))`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine similarity of unequal lengths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS_NORM);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS_NORM);
    dot / (na * nb)
}

/// Cluster-usage entropy summed over every view and the fusion view.
pub fn entropy_regularizer<T: Scalar>(g: &mut Graph<T>, c: &[Var], c_hat: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(c.len() + 1);
    for &m in c.iter().chain(std::iter::once(&c_hat)) {
        let n = g.shape(m).0;
        let col = g.sum_cols(m);
        let p = g.scale(col, t(1.0 / n as f64));
        let logp = g.log(p);
        let plogp = g.mul(p, logp)?;
        terms.push(g.sum(plogp));
    }
    let s = add_all(g, &terms)?;
    Ok(g.neg(s))
}

/// `log(rowsum(exp(S / τ)) − e^{1/τ})` with the argument floored, plus the
/// number of floored rows.
fn shifted_log_denominator<T: Scalar>(
    g: &mut Graph<T>,
    scaled: Var,
    tau: f64,
    eps_den: f64,
) -> (Var, usize) {
    let e = g.exp(scaled);
    let rows = g.sum_rows(e);
    let shifted = g.add_scalar(rows, t(-(1.0 / tau).exp()));
    let (floored, hits) = g.clamp_min(shifted, t(eps_den));
    (g.log(floored), hits)
}

fn same_shape<T: Scalar>(g: &Graph<T>, all: &[Var], what: &str) -> Result<(usize, usize)> {
    let s = g.shape(all[0]);
    if let Some(&bad) = all.iter().find(|&&x| g.shape(x) != s) {
        return Err(Error::Shape(format!(
            "{what}: {:?} does not match {:?}",
            g.shape(bad),
            s
        )));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct ClusterLoss {
    pub loss: Var,
    pub entropy: Var,
    pub floor_hits: usize,
}

/// Cluster-level contrastive loss between every view's cluster columns and
/// the fusion view's, minus the entropy regularizer when enabled.
pub fn cluster_contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    c: &[Var],
    c_hat: Var,
    cfg: &LossConfig,
) -> Result<ClusterLoss> {
    if c.is_empty() {
        return Err(Error::Shape("cluster loss needs at least one view".into()));
    }
    let mut all = c.to_vec();
    all.push(c_hat);
    let (_, k) = same_shape(g, &all, "cluster loss")?;
    if k < 2 {
        return Err(Error::Config(format!("cluster loss needs K >= 2, got {k}")));
    }
    let ct = g.transpose(c_hat);
    let anchor = g.row_l2_normalize(ct);
    let mut terms = Vec::with_capacity(c.len());
    let mut floor_hits = 0;
    for &cv in c {
        let cvt = g.transpose(cv);
        let other = g.row_l2_normalize(cvt);
        let other_t = g.transpose(other);
        let s = g.matmul(anchor, other_t)?;
        let scaled = g.scale(s, t(1.0 / cfg.tau1));
        let positive = g.diag(scaled)?;
        let (log_den, hits) = shifted_log_denominator(g, scaled, cfg.tau1, cfg.eps_den);
        floor_hits += hits;
        let diff = g.sub(positive, log_den)?;
        terms.push(g.sum(diff));
    }
    let total = add_all(g, &terms)?;
    let contrastive = g.scale(total, t(-1.0 / (2.0 * k as f64)));
    let entropy = entropy_regularizer(g, c, c_hat)?;
    let loss = if cfg.entropy_on {
        g.sub(contrastive, entropy)?
    } else {
        contrastive
    };
    Ok(ClusterLoss {
        loss,
        entropy,
        floor_hits,
    })
}

/// Instance-level contrastive loss with the fusion view as anchor and every
/// exponent `S(ĥ_i, h_j^v)/τ2` weighted by `1 − R_ij` (including `j = i`).
///
/// `pair_weights = None` means `R ≡ 0`. Features are row-normalized here, so
/// the loss depends only on directions.
pub fn instance_contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    h: &[Var],
    h_hat: Var,
    pair_weights: Option<Var>,
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    if h.is_empty() {
        return Err(Error::Shape("instance loss needs at least one view".into()));
    }
    let mut all = h.to_vec();
    all.push(h_hat);
    let (n, _) = same_shape(g, &all, "instance loss")?;
    if n < 2 {
        return Err(Error::Config(format!(
            "instance loss needs a batch of >= 2, got {n}"
        )));
    }
    let weights = match pair_weights {
        Some(r) if g.shape(r) != (n, n) => {
            return Err(Error::Shape(format!(
                "pair weights {:?} for a batch of {n}",
                g.shape(r)
            )))
        }
        Some(r) if cfg.exclude_positive => {
            let mask = g.constant(Matrix::from_fn(n, n, |i, j| {
                if i == j {
                    T::zero()
                } else {
                    T::one()
                }
            }));
            Some(g.mul(r, mask)?)
        }
        other => other,
    };
    let anchor = g.row_l2_normalize(h_hat);
    let mut terms = Vec::with_capacity(h.len());
    let mut floor_hits = 0;
    for &hv in h {
        let other = g.row_l2_normalize(hv);
        let other_t = g.transpose(other);
        let s = g.matmul(anchor, other_t)?;
        let positive = g.diag(s)?;
        let weighted = match weights {
            Some(r) => {
                let rs = g.mul(r, s)?;
                g.sub(s, rs)?
            }
            None => s,
        };
        let scaled = g.scale(weighted, t(1.0 / cfg.tau2));
        let (log_den, hits) = shifted_log_denominator(g, scaled, cfg.tau2, cfg.eps_den);
        floor_hits += hits;
        let pos = g.scale(positive, t(1.0 / cfg.tau2));
        let diff = g.sub(pos, log_den)?;
        terms.push(g.sum(diff));
    }
    let total = add_all(g, &terms)?;
    Ok((g.scale(total, t(-1.0 / (2.0 * n as f64))), floor_hits))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfoNceVariant {
    /// `−log(e^{s_ii/τ} / Σ_j e^{s_ij/τ})`.
    #[default]
    Standard,
    /// Denominator reduced by `e^{1/τ}`, as in the weighted instance loss.
    Shifted,
}

/// InfoNCE with row `i` of `other` as the positive for anchor row `i`,
/// averaged over anchors.
pub fn infonce_baseline<T: Scalar>(
    g: &mut Graph<T>,
    anchor: Var,
    other: Var,
    tau: f64,
    variant: InfoNceVariant,
    eps_den: f64,
) -> Result<(Var, usize)> {
    let (n, _) = same_shape(g, &[anchor, other], "infonce")?;
    if n < 2 {
        return Err(Error::Config(format!(
            "InfoNCE needs a batch of >= 2, got {n}"
        )));
    }
    let a = g.row_l2_normalize(anchor);
    let b = g.row_l2_normalize(other);
    let bt = g.transpose(b);
    let s = g.matmul(a, bt)?;
    let scaled = g.scale(s, t(1.0 / tau));
    let positive = g.diag(scaled)?;
    let (log_den, hits) = match variant {
        InfoNceVariant::Standard => {
            let e = g.exp(scaled);
            let rows = g.sum_rows(e);
            (g.log(rows), 0)
        }
        InfoNceVariant::Shifted => shifted_log_denominator(g, scaled, tau, eps_den),
    };
    let diff = g.sub(log_den, positive)?;
    Ok((g.mean(diff), hits))
}

/// `L_con + λ1 L_i + λ2 L_c` on one forward pass.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardOutputs,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let l_con = reconstruction_loss(g, &out.inputs, &out.reconstructions, cfg.reconstruction)?;
    let r = cfg.use_pair_weights.then_some(out.pair_weights);
    let (l_i, hits_i) = instance_contrastive_loss(g, &out.h, out.h_hat, r, cfg)?;
    let cl = cluster_contrastive_loss(g, &out.c, out.c_hat, cfg)?;
    let wi = g.scale(l_i, t(cfg.lambda1));
    let wc = g.scale(cl.loss, t(cfg.lambda2));
    let partial = g.add(l_con, wi)?;
    let total = g.add(partial, wc)?;
    Ok(LossTerms {
        l_con,
        l_i,
        l_c: cl.loss,
        entropy: cl.entropy,
        total,
        floor_hits: hits_i + cl.floor_hits,
    })
}
