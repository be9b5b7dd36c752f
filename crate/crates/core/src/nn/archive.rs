//! Named-tensor checkpoint archive.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "SCNCKPT\0"
//! version  u32      1
//! len      u32      byte length of the JSON manifest
//! manifest JSON     {"meta": {..}, "tensors": [{"name", "shape": [rows, cols]}, ..]}
//! data     f64 * Σ rows*cols, tensors in manifest order, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::Tensor;
use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SCNCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert_params(&mut self, prefix: &str, ps: &ParamSet) {
        self.meta.insert(format!("{prefix}.seed"), ps.seed().to_string());
        for (n, t) in ps.iter() {
            self.insert(format!("{prefix}/{n}"), t.clone());
        }
    }

    pub fn has_params(&self, prefix: &str) -> bool {
        self.meta.contains_key(&format!("{prefix}.seed"))
    }

    /// Rebuild a parameter set stored under `prefix`, in insertion order.
    pub fn extract_params(&self, prefix: &str) -> Result<ParamSet> {
        let seed = self
            .meta
            .get(&format!("{prefix}.seed"))
            .ok_or_else(|| Error::Malformed(format!("no parameter group `{prefix}`")))?
            .parse()
            .map_err(|_| Error::Malformed(format!("bad seed for `{prefix}`")))?;
        let lead = format!("{prefix}/");
        let (names, tensors) = self
            .entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s.to_string(), t.clone())))
            .unzip();
        Ok(ParamSet::from_parts(names, tensors, seed))
    }

    /// Overwrite `target`'s values from the group `prefix`, checking names and shapes.
    pub fn load_into(&self, prefix: &str, target: &mut ParamSet) -> Result<()> {
        let stored = self.extract_params(prefix)?;
        target.assign(&stored)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(json.len() as u32).unwrap();
        out.extend_from_slice(&json);
        for (_, t) in &self.entries {
            for v in t.iter() {
                out.write_f64::<LittleEndian>(*v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Truncated(origin.display().to_string()))?;
        if &magic != MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let trunc = |_| Error::Truncated(origin.display().to_string());
        let version = cur.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let len = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut json = vec![0u8; len];
        cur.read_exact(&mut json).map_err(trunc)?;
        let manifest: Manifest =
            serde_json::from_slice(&json).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let [r, c] = e.shape;
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                data.push(cur.read_f64::<LittleEndian>().map_err(trunc)?);
            }
            let t = Tensor::from_shape_vec((r, c), data).expect("shape matches data");
            entries.push((e.name, t));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Malformed("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            meta: manifest.meta,
            entries,
        })
    }

    /// Write the archive and return the hex SHA-256 of the written bytes.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
