//! Flat tensor archive used for checkpoints and attention-trace dumps.
//!
//! Layout: the 8-byte magic `EANCKPT1`, a `u64` little-endian manifest
//! length, the UTF-8 JSON manifest, then the raw little-endian buffers.
//! Manifest offsets are relative to the first byte after the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EANCKPT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    tensors: BTreeMap<String, ArchiveEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// In-memory contents of an archive file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut manifest = Manifest {
        meta: archive.meta.clone(),
        ..Default::default()
    };
    let mut offset = 0u64;
    for (name, t) in &archive.tensors {
        manifest.tensors.insert(
            name.clone(),
            ArchiveEntry {
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += 8 * t.numel() as u64;
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in archive.tensors.values() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_header(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing EANCKPT1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    Ok((manifest, end))
}

/// Reads only the manifest (names, dtypes, shapes, offsets) and metadata.
pub fn read_archive_manifest(
    path: &Path,
) -> Result<(BTreeMap<String, ArchiveEntry>, BTreeMap<String, serde_json::Value>)> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|_| corrupt("truncated header"))?;
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut bytes = head.to_vec();
    bytes.resize(16 + len, 0);
    f.read_exact(&mut bytes[16..]).map_err(|_| corrupt("truncated manifest"))?;
    let (m, _) = read_header(&bytes)?;
    Ok((m.tensors, m.meta))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path)?;
    let (manifest, data_start) = read_header(&bytes)?;
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for (name, e) in manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(corrupt(format!("{name}: unsupported dtype {other}"))),
        };
        let start = e.offset as usize;
        let end = start
            .checked_add(numel * width)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| corrupt(format!("{name}: buffer out of bounds")))?;
        let raw = &data[start..end];
        let values: Vec<f64> = if width == 8 {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
        tensors.insert(name, Tensor::new(&e.shape, values)?);
    }
    Ok(Archive {
        tensors,
        meta: manifest.meta,
    })
}
