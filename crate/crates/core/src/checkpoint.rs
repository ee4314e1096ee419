//! Model serialization: a one-line JSON header (kind, dimensions, and a
//! name/shape manifest in registration order) followed by the raw parameter
//! payload as little-endian f32, concatenated in the same order.
//!
//! The manifest makes loads self-validating: a checkpoint only loads into a
//! model whose parameter names and shapes match exactly, so silent weight
//! transposition or reordering cannot happen.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::{Model, ModelConfig, ModelKind};
use crate::scalar::Scalar;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_kind: ModelKind,
    config: ModelConfig,
    manifest: Vec<(String, Vec<usize>)>,
}

/// Writes `model` to `path`. The payload is always f32 regardless of the
/// model's compute type.
pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model_kind: model.kind(),
        config: *model.config(),
        manifest: model
            .params()
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.shape().dims().to_vec()))
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, entry) in model.params().iter() {
        for &x in entry.value.data() {
            w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header_line(r: &mut impl Read, path: &Path) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Checkpoint(format!(
                "{}: missing header line",
                path.display()
            )));
        }
        if byte[0] == b'\n' {
            return Ok(line);
        }
        line.push(byte[0]);
    }
}

/// Reads a checkpoint back into a freshly constructed model of scalar type
/// `S`, validating the manifest name-by-name and shape-by-shape.
pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let line = read_header_line(&mut r, path)?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (this build reads {})",
            path.display(),
            header.format_version,
            FORMAT_VERSION
        )));
    }

    let mut model: Model<S> = Model::new(header.model_kind, header.config, 0)?;
    let params = model.params_mut();
    if header.manifest.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: manifest lists {} parameters, model has {}",
            path.display(),
            header.manifest.len(),
            params.len()
        )));
    }

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut buf = [0u8; 4];
    for (i, (name, dims)) in header.manifest.iter().enumerate() {
        let entry = params.entry(ids[i]);
        if *name != entry.name || dims != entry.value.shape().dims() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {i} is {:?} with shape {:?}, model expects {:?} with shape {:?}",
                path.display(),
                name,
                dims,
                entry.name,
                entry.value.shape().dims()
            )));
        }
        let value = params.value_mut(ids[i]);
        for j in 0..value.len() {
            r.read_exact(&mut buf).map_err(|e| {
                Error::Checkpoint(format!("{}: truncated payload: {e}", path.display()))
            })?;
            value.data_mut()[j] = S::from_f64(f32::from_le_bytes(buf) as f64);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Ok(model)
}
