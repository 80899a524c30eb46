//! Multi-view datasets: container, on-disk format, synthetic generator and
//! mini-batch sampling.

mod batch;
mod format;
mod synthetic;

pub use batch::{batch_iter, BatchIndices};
pub use format::{
    import_csv, load_dataset, save_dataset, write_labels, write_matrix, DATASET_FORMAT,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::fmt;

use dcmcs_tensor::{Matrix, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Storage precision of real-valued arrays on disk (and of training maths).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Rounds `x` to the nearest value representable at this precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u32::from(*self))
    }
}

/// `V` feature matrices over the same `N` samples, plus optional labels.
///
/// Values are held as `f64` but are always exactly representable at
/// `precision`, so saving and reloading is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    name: String,
    views: Vec<Matrix<f64>>,
    labels: Option<Vec<usize>>,
    n_clusters: usize,
    precision: Precision,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Matrix<f64>>,
        labels: Option<Vec<usize>>,
        n_clusters: usize,
        precision: Precision,
    ) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(Error::Dataset("a dataset needs at least one view".into()));
        };
        if n_clusters < 2 {
            return Err(Error::Dataset(format!(
                "cluster count must be at least 2, got {n_clusters}"
            )));
        }
        let n = first.rows();
        if n == 0 {
            return Err(Error::Dataset("a dataset needs at least one sample".into()));
        }
        for (v, view) in views.iter().enumerate() {
            if view.rows() != n {
                return Err(Error::Shape(format!(
                    "view {v} has {} rows, expected {n}",
                    view.rows()
                )));
            }
            if view.cols() == 0 {
                return Err(Error::Dataset(format!("view {v} has zero columns")));
            }
            if !view.all_finite() {
                return Err(Error::Dataset(format!(
                    "view {v} contains non-finite values"
                )));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_clusters) {
                return Err(Error::Dataset(format!(
                    "label {l} at sample {i} is outside [0, {n_clusters})"
                )));
            }
        }
        let views = views
            .into_iter()
            .map(|m| m.map(|x| precision.round(x)))
            .collect();
        Ok(Self {
            name: name.into(),
            views,
            labels,
            n_clusters,
            precision,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Matrix::cols).collect()
    }

    pub fn views(&self) -> &[Matrix<f64>] {
        &self.views
    }

    pub fn view(&self, v: usize) -> &Matrix<f64> {
        &self.views[v]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Rows `indices` of every view, converted to the training scalar type.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Vec<Matrix<T>> {
        self.views
            .iter()
            .map(|v| v.select_rows(indices).cast())
            .collect()
    }

    /// SHA-256 over shape metadata, stored-precision values and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"dcmcs-dataset-v1");
        for x in [
            self.n_samples(),
            self.n_views(),
            self.n_clusters,
            self.precision.bytes(),
        ] {
            h.update((x as u64).to_le_bytes());
        }
        let mut buf = Vec::new();
        for view in &self.views {
            h.update((view.cols() as u64).to_le_bytes());
            buf.clear();
            format::encode_values(view.data(), self.precision, &mut buf);
            h.update(&buf);
        }
        match &self.labels {
            Some(labels) => {
                h.update([1u8]);
                for &l in labels {
                    h.update((l as u64).to_le_bytes());
                }
            }
            None => h.update([0u8]),
        }
        hex::encode(h.finalize())
    }
}
