//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/checkpoint.toml  format, precision, progress, architecture, config,
//!                        parameter names and shapes in block order
//! <dir>/params.bin       every parameter in model order, row-major
//!                        little-endian at the checkpoint precision
//! <dir>/optimizer.bin    for each optimized parameter in model order, its
//!                        first-moment block then its second-moment block
//! <dir>/trace.jsonl      epoch log up to the checkpoint
//! ```

use std::fs;
use std::path::Path;

use dcmcs_tensor::{Adam, Matrix, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Precision;
use crate::error::{Error, Result};
use crate::model::{Architecture, DcmcsModel};
use crate::trainer::{Phase, RunTrace, Session};

pub const CHECKPOINT_FORMAT: &str = "dcmcs-checkpoint";
const VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.toml";
const PARAMS: &str = "params.bin";
const OPTIMIZER: &str = "optimizer.bin";
const TRACE: &str = "trace.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    precision: Precision,
    seed: u64,
    phase: Phase,
    phase_epoch: usize,
    completed_epochs: usize,
    adam_step: u64,
    optimized: Vec<String>,
    architecture: Architecture,
    config: TrainConfig,
    params: Vec<Block>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode<T: Scalar>(blocks: &[&Matrix<T>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(blocks.iter().map(|b| b.len() * T::BYTES).sum());
    for b in blocks {
        for &x in b.data() {
            x.write_le(&mut out);
        }
    }
    out
}

fn decode<T: Scalar>(
    path: &Path,
    bytes: &[u8],
    shapes: &[(usize, usize)],
) -> Result<Vec<Matrix<T>>> {
    let expected: usize = shapes.iter().map(|(r, c)| r * c * T::BYTES).sum();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("{} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let len = r * c * T::BYTES;
            let data = bytes[offset..offset + len]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            offset += len;
            Ok(Matrix::from_vec(r, c, data)?)
        })
        .collect()
}

/// Writes the complete training state of `session`.
///
/// The stored epoch log has its wall-clock fields zeroed so that equal runs
/// give byte-identical checkpoints.
pub fn save_session<T: Scalar>(session: &Session<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = session.model();
    let trainable = session.trainable();
    let cfg = session.config();
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION,
        precision: cfg.precision,
        seed: cfg.seed,
        phase: session.phase(),
        phase_epoch: session.phase_epoch(),
        completed_epochs: session.trace().records.len(),
        adam_step: session.optimizer().step_count(),
        optimized: trainable
            .iter()
            .map(|&i| model.params()[i].name.clone())
            .collect(),
        architecture: model.architecture().clone(),
        config: cfg.clone(),
        params: model
            .params()
            .iter()
            .map(|p| Block {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let text =
        toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    write(&dir.join(MANIFEST), text.as_bytes())?;
    let values: Vec<&Matrix<T>> = model.params().iter().map(|p| &p.value).collect();
    write(&dir.join(PARAMS), &encode(&values))?;
    let opt = session.optimizer();
    let moments: Vec<&Matrix<T>> = opt
        .first_moments()
        .iter()
        .zip(opt.second_moments())
        .flat_map(|(m, v)| [m, v])
        .collect();
    write(&dir.join(OPTIMIZER), &encode(&moments))?;
    write(
        &dir.join(TRACE),
        session.trace().without_timing().to_jsonl().as_bytes(),
    )
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = read(&path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != VERSION {
        return Err(Error::format(
            &path,
            format!(
                "expected {CHECKPOINT_FORMAT} v{VERSION}, found {} v{}",
                m.format, m.version
            ),
        ));
    }
    Ok(m)
}

/// Storage precision of the checkpoint in `dir`.
pub fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    Ok(read_manifest(dir)?.precision)
}

fn load_model_from<T: Scalar>(dir: &Path, m: &Manifest) -> Result<DcmcsModel<T>> {
    if T::BYTES != m.precision.bytes() {
        return Err(Error::Config(format!(
            "checkpoint is {}-bit, requested {}-bit",
            m.precision,
            T::BYTES * 8
        )));
    }
    let mut model = DcmcsModel::<T>::zeroed(m.architecture.clone());
    let layout: Vec<Block> = model
        .params()
        .iter()
        .map(|p| Block {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    if layout != m.params {
        return Err(Error::format(
            dir.join(MANIFEST),
            "parameter list does not match the architecture",
        ));
    }
    let shapes: Vec<_> = layout.iter().map(|b| (b.rows, b.cols)).collect();
    let path = dir.join(PARAMS);
    let values = decode::<T>(&path, &read(&path)?, &shapes)?;
    for (p, v) in model.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    Ok(model)
}

/// Model and run configuration stored in `dir`.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<(DcmcsModel<T>, TrainConfig)> {
    let m = read_manifest(dir)?;
    let model = load_model_from(dir, &m)?;
    Ok((model, m.config))
}

/// Restores a session that continues exactly where [`save_session`] left it.
pub fn load_session<T: Scalar>(dir: &Path) -> Result<Session<T>> {
    let m = read_manifest(dir)?;
    let model = load_model_from::<T>(dir, &m)?;
    let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    let mut shapes = Vec::with_capacity(2 * m.optimized.len());
    for name in &m.optimized {
        let i = names.iter().position(|n| n == name).ok_or_else(|| {
            Error::format(dir.join(MANIFEST), format!("unknown parameter {name}"))
        })?;
        let s = model.params()[i].value.shape();
        shapes.extend([s, s]);
    }
    let path = dir.join(OPTIMIZER);
    let mut moments = decode::<T>(&path, &read(&path)?, &shapes)?.into_iter();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    while let (Some(a), Some(b)) = (moments.next(), moments.next()) {
        first.push(a);
        second.push(b);
    }
    let adam = Adam::from_state(m.config.adam(), m.adam_step, first, second)?;
    let trace_path = dir.join(TRACE);
    let trace_text = String::from_utf8(read(&trace_path)?)
        .map_err(|e| Error::format(&trace_path, e.to_string()))?;
    let trace = RunTrace::from_jsonl(&trace_text)?;
    if trace.records.len() != m.completed_epochs {
        return Err(Error::format(
            trace_path,
            format!(
                "{} epoch records, manifest declares {}",
                trace.records.len(),
                m.completed_epochs
            ),
        ));
    }
    let session = Session::from_parts(m.config, model, m.phase, m.phase_epoch, adam, trace)?;
    let optimized: Vec<&str> = session
        .trainable()
        .iter()
        .map(|&i| session.model().params()[i].name.as_str())
        .collect();
    if optimized != m.optimized.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::format(
            dir.join(MANIFEST),
            "optimized parameter list does not match the phase",
        ));
    }
    Ok(session)
}
