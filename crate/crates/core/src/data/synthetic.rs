use dcmcs_tensor::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MultiViewDataset, Precision};
use crate::error::{Error, Result};
use crate::seeding::{rng, Stream};

/// Recipe for a Gaussian-mixture multi-view dataset.
///
/// Latent samples are drawn around `n_clusters` Gaussian centers (scaled by
/// `separation`) with isotropic spread `latent_spread`. View `v` maps each
/// latent sample through its own random linear map, applies `tanh`, and
/// adds Gaussian noise of scale `noise[v]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_samples: usize,
    pub n_clusters: usize,
    pub latent_dim: usize,
    pub view_dims: Vec<usize>,
    pub noise: Vec<f64>,
    pub separation: f64,
    #[serde(default = "default_spread")]
    pub latent_spread: f64,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_spread() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub const BUNDLED: [&'static str; 2] = ["synthetic3d-like", "imbalanced-views"];

    /// 600 samples, 3 views, 3 clusters, moderate noise on every view.
    pub fn synthetic3d_like() -> Self {
        Self {
            name: "synthetic3d-like".into(),
            n_samples: 600,
            n_clusters: 3,
            latent_dim: 4,
            view_dims: vec![20, 20, 20],
            noise: vec![0.3, 0.3, 0.3],
            separation: 2.0,
            latent_spread: 1.0,
            seed: 2024,
            precision: Precision::F32,
        }
    }

    /// Like [`synthetic3d_like`](Self::synthetic3d_like) but the last view
    /// carries ten times the noise of the others.
    pub fn imbalanced_views() -> Self {
        Self {
            name: "imbalanced-views".into(),
            noise: vec![0.3, 0.3, 3.0],
            ..Self::synthetic3d_like()
        }
    }

    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "synthetic3d-like" => Some(Self::synthetic3d_like()),
            "imbalanced-views" => Some(Self::imbalanced_views()),
            _ => None,
        }
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.view_dims.is_empty() {
            return bad("at least one view is required".into());
        }
        if self.noise.len() != self.view_dims.len() {
            return bad(format!(
                "{} noise scales for {} views",
                self.noise.len(),
                self.view_dims.len()
            ));
        }
        if self.n_clusters < 2 {
            return bad(format!("n_clusters must be >= 2, got {}", self.n_clusters));
        }
        if self.n_samples < self.n_clusters {
            return bad(format!(
                "n_samples ({}) must be at least n_clusters ({})",
                self.n_samples, self.n_clusters
            ));
        }
        if self.latent_dim == 0 || self.view_dims.contains(&0) {
            return bad("all dimensions must be >= 1".into());
        }
        if self.noise.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("noise scales must be finite and >= 0".into());
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be finite and > 0".into());
        }
        if !(self.latent_spread >= 0.0 && self.latent_spread.is_finite()) {
            return bad("latent_spread must be finite and >= 0".into());
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = rng(spec.seed, Stream::Synthetic);
    let (n, k, d0) = (spec.n_samples, spec.n_clusters, spec.latent_dim);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let centers = Matrix::from_fn(k, d0, |_, _| spec.separation * normal());
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let latent = Matrix::from_fn(n, d0, |i, j| {
        centers.get(labels[i], j) + spec.latent_spread * normal()
    });

    let scale = 1.0 / (d0 as f64).sqrt();
    let mut views = Vec::with_capacity(spec.n_views());
    for (&dim, &sigma) in spec.view_dims.iter().zip(&spec.noise) {
        let map = Matrix::from_fn(d0, dim, |_, _| scale * normal());
        let mut view = latent.matmul(&map)?;
        for x in view.data_mut() {
            *x = x.tanh() + sigma * normal();
        }
        views.push(view);
    }
    MultiViewDataset::new(spec.name.clone(), views, Some(labels), k, spec.precision)
}
