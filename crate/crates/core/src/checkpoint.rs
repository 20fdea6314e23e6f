//! Versioned binary checkpoint container shared by the filter and head
//! models: magic header, config echo, then named parameter tensors in
//! declaration order as row-major little-endian f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"SCFCRCCK";
const VERSION: u32 = 1;

/// Which model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Filter = 1,
    Head = 2,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Self::Filter),
            2 => Some(Self::Head),
            _ => None,
        }
    }
}

/// A parsed checkpoint: the config echo plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config_json: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

/// Serialize a parameter store with its config echo.
pub fn write_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    config_json: &str,
    store: &ParamStore,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    let cfg = config_json.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.tensors() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &x in value.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut file =
        fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    file.write_all(&out).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Parse a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let take_u32 = |off: &mut usize| -> Result<u32> {
        let s = take(off, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    if take(&mut off, 8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if take_u32(&mut off)? != VERSION {
        return Err(bad("unsupported version"));
    }
    let kind = CheckpointKind::from_u32(take_u32(&mut off)?).ok_or_else(|| bad("unknown kind"))?;
    let cfg_len = take_u32(&mut off)? as usize;
    let config_json = String::from_utf8(take(&mut off, cfg_len)?.to_vec())
        .map_err(|_| bad("config echo is not utf-8"))?;
    let n_tensors = take_u32(&mut off)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = take_u32(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not utf-8"))?;
        let rows = take_u32(&mut off)? as usize;
        let cols = take_u32(&mut off)? as usize;
        let data = take(&mut off, rows * cols * 4)?;
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = Array2::from_shape_vec((rows, cols), values)
            .map_err(|_| bad("tensor shape mismatch"))?;
        tensors.push((name, tensor));
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { kind, config_json, tensors })
}

/// Copy checkpoint tensors into a freshly constructed store, matching
/// declaration order, names, and shapes.
pub fn load_into_store(ckpt: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    if ckpt.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.tensors.len(),
            store.len()
        )));
    }
    for (i, (name, value)) in ckpt.tensors.iter().enumerate() {
        if store.name(i) != name {
            return Err(Error::Checkpoint(format!(
                "tensor {i} name mismatch: checkpoint {name:?}, model {:?}",
                store.name(i)
            )));
        }
        if store.value(crate::nn::ParamId(i)).dim() != value.dim() {
            return Err(Error::Checkpoint(format!("tensor {name} shape mismatch")));
        }
        store.set_by_index(i, value.clone());
    }
    Ok(())
}
