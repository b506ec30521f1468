//! Parameter checkpoints as versioned JSON.
//!
//! Tensors are written in name order and `f64` values use shortest
//! round-trip formatting, so the same parameters always produce the same
//! bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "textloc-params";

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    tensors: Vec<Record>,
}

pub fn write_params(store: &ParamStore, mut out: impl Write) -> Result<(), NumericsError> {
    let ckpt = Checkpoint {
        format: FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        tensors: store
            .iter()
            .map(|(name, t)| Record {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut out, &ckpt).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_params(mut input: impl Read) -> Result<ParamStore, NumericsError> {
    let mut buf = String::new();
    input.read_to_string(&mut buf)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&buf).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    if ckpt.format != FORMAT {
        return Err(NumericsError::Checkpoint(format!(
            "unexpected format tag `{}`",
            ckpt.format
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported version {}",
            ckpt.version
        )));
    }
    let mut store = ParamStore::new();
    for rec in ckpt.tensors {
        let t = Tensor::new(rec.shape, rec.values)?;
        if !t.is_finite() {
            return Err(NumericsError::Checkpoint(format!(
                "tensor `{}` holds non-finite values",
                rec.name
            )));
        }
        store.insert(rec.name, t);
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<(), NumericsError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_params(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore, NumericsError> {
    read_params(std::fs::File::open(path)?)
}
