//! Binary checkpoint container.
//!
//! Layout: magic `NAECKPT1`, a little-endian `u32` manifest length, the JSON
//! manifest, a `u32` entry count, then entries of
//! `kind:u8 | name_len:u16 | name | ndim:u8 | dims:u64* | payload`.
//! Kind 0 is an `f64` tensor, kind 1 a `u64` array.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NAECKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("missing entry `{0}`")]
    Missing(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
    pub counters: BTreeMap<String, Vec<u64>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    pub fn counter(&self, name: &str) -> Result<&[u64]> {
        self.counters.get(name).map(Vec::as_slice).ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_all(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) {
        for (k, v) in map {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&((self.tensors.len() + self.counters.len()) as u32).to_le_bytes())?;
        let header = |w: &mut dyn Write, kind: u8, name: &str, dims: &[usize]| -> io::Result<()> {
            w.write_all(&[kind])?;
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[dims.len() as u8])?;
            for &d in dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            Ok(())
        };
        for (name, t) in &self.tensors {
            header(w, 0, name, t.shape())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for (name, c) in &self.counters {
            header(w, 1, name, &[c.len()])?;
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let corrupt = |e: io::Error| CheckpointError::Corrupt(e.to_string());
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(corrupt)?;
        let mut manifest = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut manifest).map_err(corrupt)?;
        let manifest = serde_json::from_slice(&manifest)?;
        r.read_exact(&mut u32b).map_err(corrupt)?;
        let count = u32::from_le_bytes(u32b);
        let mut out = Checkpoint {
            manifest,
            ..Default::default()
        };
        for _ in 0..count {
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1).map_err(corrupt)?;
            let kind = b1[0];
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(corrupt)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name).map_err(corrupt)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            r.read_exact(&mut b1).map_err(corrupt)?;
            let mut dims = Vec::with_capacity(b1[0] as usize);
            let mut b8 = [0u8; 8];
            for _ in 0..b1[0] {
                r.read_exact(&mut b8).map_err(corrupt)?;
                dims.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = dims.iter().product();
            if n > 1 << 32 {
                return Err(CheckpointError::Corrupt(format!("entry `{name}` claims {n} elements")));
            }
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(corrupt)?;
            let words = raw.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
            match kind {
                0 => {
                    let data = words.map(f64::from_le_bytes).collect();
                    let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
                    out.tensors.insert(name, t);
                }
                1 => {
                    out.counters.insert(name, words.map(u64::from_le_bytes).collect());
                }
                k => return Err(CheckpointError::Corrupt(format!("unknown entry kind {k}"))),
            }
        }
        Ok(out)
    }

    /// Writes via a temporary sibling file and rename, so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
