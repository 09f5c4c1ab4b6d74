//! Tensor archive file format.
//!
//! Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
//! header `{"version":1,"entries":[{"name","shape","dtype"}]}` and then the
//! concatenated row-major little-endian f32 payloads in entry order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    entries: Vec<HeaderEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveEntry {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f32_slice(&self.shape, &self.data)
    }
}

/// In-memory archive; all payloads are f32 on disk regardless of the scalar
/// type used in memory.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct TensorArchive {
    entries: Vec<ArchiveEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive::default()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Archive(format!("duplicate entry name {name:?}")));
        }
        self.entries.push(ArchiveEntry {
            name,
            shape: tensor.shape().to_vec(),
            data: tensor.to_f32_vec(),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("missing entry {name:?}")))?
            .to_tensor()
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            version: ARCHIVE_VERSION,
            entries: self
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: "f32".to_string(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut entries = Vec::with_capacity(header.entries.len());
        for he in header.entries {
            if he.dtype != "f32" {
                return Err(Error::Archive(format!("unsupported dtype {:?}", he.dtype)));
            }
            let n: usize = he.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(ArchiveEntry {
                name: he.name,
                shape: he.shape,
                data,
            });
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Archive("trailing bytes after payload".into()));
        }
        Ok(TensorArchive { entries })
    }
}
