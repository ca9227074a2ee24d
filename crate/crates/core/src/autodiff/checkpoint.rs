//! `AWM1` named-tensor container: a compact JSON header, the two bytes
//! `"\n\0"`, then every tensor as little-endian `f64`. Offsets in the header
//! are byte offsets into the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "AWM1";
const SEPARATOR: &[u8] = b"\n\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        magic: MAGIC.to_string(),
        tensors: entries,
    };
    w.write_all(&serde_json::to_vec(&header)?)?;
    w.write_all(SEPARATOR)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            header.magic
        )));
    }
    let payload = &bytes[split + SEPARATOR.len()..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = usize::try_from(e.offset)
            .map_err(|_| Error::Checkpoint(format!("offset of {} too large", e.name)))?;
        let end = start
            .checked_add(8 * n)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(e.shape, data)
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), tensors)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(std::fs::File::open(path)?)
}
