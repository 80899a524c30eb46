//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.toml   name, sample/view/cluster counts, view dims, precision
//! <dir>/view_<v>.bin    row-major little-endian floats, no header or padding
//! <dir>/labels.txt      optional, one integer per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use dcmcs_tensor::Matrix;
use serde::{Deserialize, Serialize};

use super::{MultiViewDataset, Precision};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "dcmcs-dataset";
const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const LABELS: &str = "labels.txt";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    n_samples: usize,
    n_views: usize,
    n_clusters: usize,
    view_dims: Vec<usize>,
    precision: Precision,
    has_labels: bool,
}

fn view_file(v: usize) -> String {
    format!("view_{v}.bin")
}

pub(crate) fn encode_values(values: &[f64], precision: Precision, out: &mut Vec<u8>) {
    out.reserve(values.len() * precision.bytes());
    match precision {
        Precision::F32 => values
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Precision::F64 => values
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

fn decode_values(bytes: &[u8], precision: Precision) -> Vec<f64> {
    match precision {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

/// Writes one matrix in the view-file encoding.
pub fn write_matrix(path: &Path, m: &Matrix<f64>, precision: Precision) -> Result<()> {
    let mut buf = Vec::new();
    encode_values(m.data(), precision, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        name: ds.name().into(),
        n_samples: ds.n_samples(),
        n_views: ds.n_views(),
        n_clusters: ds.n_clusters(),
        view_dims: ds.view_dims(),
        precision: ds.precision(),
        has_labels: ds.labels().is_some(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (v, view) in ds.views().iter().enumerate() {
        write_matrix(&dir.join(view_file(v)), view, ds.precision())?;
    }
    let labels_path = dir.join(LABELS);
    match ds.labels() {
        Some(labels) => write_labels(&labels_path, labels)?,
        None if labels_path.exists() => {
            fs::remove_file(&labels_path).map_err(|e| Error::io(&labels_path, e))?
        }
        None => {}
    }
    Ok(())
}

/// One integer per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: `{l}` is not a label", i + 1)))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if m.format != DATASET_FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!(
                "expected {DATASET_FORMAT} v{FORMAT_VERSION}, found {} v{}",
                m.format, m.version
            ),
        ));
    }
    if m.view_dims.len() != m.n_views {
        return Err(Error::format(
            &manifest_path,
            format!(
                "n_views = {} but {} view dims listed",
                m.n_views,
                m.view_dims.len()
            ),
        ));
    }
    if m.n_views == 0 || m.n_samples == 0 {
        return Err(Error::format(&manifest_path, "empty dataset"));
    }

    let mut views = Vec::with_capacity(m.n_views);
    for (v, &dim) in m.view_dims.iter().enumerate() {
        let path: PathBuf = dir.join(view_file(v));
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let row_bytes = dim * m.precision.bytes();
        if row_bytes == 0 || bytes.len() % row_bytes != 0 {
            return Err(Error::Shape(format!(
                "{}: {} bytes is not a whole number of {dim}-wide rows",
                path.display(),
                bytes.len()
            )));
        }
        let rows = bytes.len() / row_bytes;
        if rows != m.n_samples {
            return Err(Error::Shape(format!(
                "{}: holds {rows} rows, manifest declares {}",
                path.display(),
                m.n_samples
            )));
        }
        let values = decode_values(&bytes, m.precision);
        views.push(Matrix::from_vec(rows, dim, values)?);
    }

    let labels = if m.has_labels {
        let path = dir.join(LABELS);
        let labels = read_labels(&path)?;
        if labels.len() != m.n_samples {
            return Err(Error::Shape(format!(
                "{}: {} labels, manifest declares {} samples",
                path.display(),
                labels.len(),
                m.n_samples
            )));
        }
        Some(labels)
    } else {
        None
    };
    MultiViewDataset::new(m.name, views, labels, m.n_clusters, m.precision)
}

fn read_csv_matrix(path: &Path) -> Result<Matrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let row: Result<Vec<f64>> = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("record {}: `{f}` is not a number", i + 1))
                })
            })
            .collect();
        rows.push(row?);
    }
    Matrix::from_rows(&rows).map_err(|_| Error::format(path, "rows have differing lengths"))
}

/// Builds a dataset from one headerless numeric CSV per view and an optional
/// labels file (one integer per line).
pub fn import_csv(
    name: &str,
    view_paths: &[PathBuf],
    labels_path: Option<&Path>,
    n_clusters: usize,
    precision: Precision,
) -> Result<MultiViewDataset> {
    let views = view_paths
        .iter()
        .map(|p| read_csv_matrix(p))
        .collect::<Result<Vec<_>>>()?;
    let labels = labels_path.map(read_labels).transpose()?;
    MultiViewDataset::new(name, views, labels, n_clusters, precision)
}
