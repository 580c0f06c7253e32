//! Checkpoint format: magic "CTCK", versioned list of named parameter
//! tensors (f32, little-endian), then a trailing UTF-8 JSON metadata block.

use super::{open_buffered, read_exact_bytes, DataError};
use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub epoch: u32,
    pub val_loss: f64,
    pub val_auc: f64,
    pub config_hash: String,
}

/// One named parameter: shape plus flat row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<ParamEntry>,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(
    params: &[ParamEntry],
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| DataError::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(params.len() as u32).map_err(io_err)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_u32::<LittleEndian>(p.shape.len() as u32).map_err(io_err)?;
        for &d in &p.shape {
            w.write_u32::<LittleEndian>(d as u32).map_err(io_err)?;
        }
        debug_assert_eq!(p.data.len(), p.shape.iter().product::<usize>());
        for &v in &p.data {
            w.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    let meta_json = serde_json::to_string(meta).expect("meta serializes");
    w.write_all(meta_json.as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let mut r = open_buffered(path)?;
    let head = read_exact_bytes(&mut r, 12, path)?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: "CTCK".into(),
        });
    }
    let version = LittleEndian::read_u32(&head[4..8]);
    if version != CHECKPOINT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let count = LittleEndian::read_u32(&head[8..12]) as usize;
    let mut params = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let name_bytes = read_exact_bytes(&mut r, name_len, path)?;
        let name = String::from_utf8(name_bytes).map_err(|_| DataError::CorruptEntry {
            id: path.display().to_string(),
            detail: "parameter name is not UTF-8".into(),
        })?;
        if !seen.insert(name.clone()) {
            return Err(DataError::CorruptEntry {
                id: name,
                detail: "duplicate parameter name".into(),
            });
        }
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact_bytes(&mut r, numel * 4, path)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.push(ParamEntry { name, shape, data });
    }
    let mut meta_text = String::new();
    r.read_to_string(&mut meta_text)
        .map_err(|e| DataError::io(path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(|e| DataError::CorruptEntry {
            id: path.display().to_string(),
            detail: format!("bad metadata block: {e}"),
        })?;
    Ok(Checkpoint { params, meta })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let bytes = read_exact_bytes(r, 4, path)?;
    Ok(LittleEndian::read_u32(&bytes))
}
