//! Single-file checkpoint container.
//!
//! Layout: the magic bytes, a little-endian `u64` manifest length, a JSON
//! manifest, then raw little-endian `f64` data. Each manifest entry names an
//! array with its dtype, shape and byte offset into the data section.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"DMTCICKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    payload: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Writes named arrays plus a JSON payload.
pub fn write_container<P: Serialize>(path: &Path, payload: &P, arrays: &[(String, &Matrix)]) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, m) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += 8 * m.len() as u64;
    }
    let manifest = Manifest {
        format_version: 1,
        payload: serde_json::to_value(payload)?,
        arrays: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, m) in arrays {
        for &x in m.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a container back into its payload and named arrays.
pub fn read_container<P: for<'de> Deserialize<'de>>(path: &Path) -> Result<(P, BTreeMap<String, Matrix>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut arrays = BTreeMap::new();
    for e in manifest.arrays {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("array {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("array {} runs past the end of the file", e.name)));
        }
        let vals = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.insert(e.name, Matrix::from_vec(e.shape[0], e.shape[1], vals));
    }
    let payload = serde_json::from_value(manifest.payload)?;
    Ok((payload, arrays))
}
