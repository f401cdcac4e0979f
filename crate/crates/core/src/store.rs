//! Binary vector store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     [u8; 4]  = b"S2VB"
//! version   u32      = 1
//! dimension u32
//! count     u64
//! ids       count x (u32 byte length, UTF-8 bytes)
//! matrix    count x dimension f32, row-major
//! ```
//!
//! The same layout holds song vectors (ids are track ids) and taste vectors
//! (ids are [`crate::taste::TasteKey::label`]s).

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"S2VB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    pub dimension: usize,
    pub ids: Vec<String>,
    /// Row-major, `ids.len() * dimension` values.
    pub values: Vec<f32>,
}

impl VectorStore {
    pub fn new(dimension: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != ids.len() * dimension {
            return Err(Error::Format(format!(
                "{} values for {} rows of dimension {dimension}",
                values.len(),
                ids.len()
            )));
        }
        Ok(VectorStore { dimension, ids, values })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        let dim = u32::try_from(self.dimension).map_err(|_| Error::Format("dimension too large".into()))?;
        out.write_all(&MAGIC).map_err(io)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&dim.to_le_bytes()).map_err(io)?;
        out.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io)?;
        for id in &self.ids {
            let len = u32::try_from(id.len()).map_err(|_| Error::Format("id too long".into()))?;
            out.write_all(&len.to_le_bytes()).map_err(io)?;
            out.write_all(id.as_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
        out.flush().map_err(io)
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let truncated = |e: std::io::Error| Error::Format(format!("truncated vector store: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b4).map_err(truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        input.read_exact(&mut b4).map_err(truncated)?;
        let dimension = u32::from_le_bytes(b4) as usize;
        input.read_exact(&mut b8).map_err(truncated)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            input.read_exact(&mut b4).map_err(truncated)?;
            let mut bytes = vec![0u8; u32::from_le_bytes(b4) as usize];
            input.read_exact(&mut bytes).map_err(truncated)?;
            ids.push(String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut raw = vec![0u8; count * dimension * 4];
        input.read_exact(&mut raw).map_err(truncated)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(truncated)? != 0 {
            return Err(Error::Format("trailing bytes after vector matrix".into()));
        }
        VectorStore::new(dimension, ids, values)
    }

    /// Tab-separated export: id followed by `dimension` values per line.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        for (i, id) in self.ids.iter().enumerate() {
            let mut line = id.clone();
            for v in self.row(i) {
                line.push('\t');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}
