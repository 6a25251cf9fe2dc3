//! Binary tensor checkpoints with a JSON sidecar.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "NAPL" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 values (LE)
//! ```
//!
//! The sidecar `<file>.json` records the model kind, the step counter and
//! the run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use napl_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{NaplError, Result};

pub const MAGIC: &[u8; 4] = b"NAPL";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> NaplError {
        NaplError::Parse {
            path: self.path.into(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NamedTensors> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a NAPL checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4, "tensor values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after the last tensor"));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pwc,
    Napl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub step: u64,
    pub epoch: usize,
    pub val_miou: Option<f64>,
    pub config: RunConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn store_tensors(store: &ParamStore) -> NamedTensors {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}

pub fn save(path: &Path, store: &ParamStore, sidecar: &Sidecar) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| NaplError::io(dir, e))?;
    }
    fs::write(path, encode(&store_tensors(store))).map_err(|e| NaplError::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| NaplError::json(&side, e))?;
    fs::write(&side, text + "\n").map_err(|e| NaplError::io(&side, e))
}

pub fn load(path: &Path) -> Result<(NamedTensors, Sidecar)> {
    let bytes = fs::read(path).map_err(|e| NaplError::io(path, e))?;
    let tensors = decode(&bytes, path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| NaplError::io(&side, e))?;
    let sidecar = serde_json::from_str(&text).map_err(|e| NaplError::json(&side, e))?;
    Ok((tensors, sidecar))
}

/// Overwrites every tensor of `store` with the checkpoint tensor of the same
/// name. Missing, extra or mis-shaped tensors are errors naming the tensor.
pub fn apply(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    if let Some((name, _)) = tensors.iter().find(|(n, _)| store.find(n).is_none()) {
        return Err(NaplError::Checkpoint(format!(
            "tensor {name} does not exist in the model"
        )));
    }
    for entry in store.entries_mut() {
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| *n == entry.name)
            .ok_or_else(|| NaplError::Checkpoint(format!("tensor {} is missing", entry.name)))?;
        if t.shape() != entry.value.shape() {
            return Err(NaplError::Checkpoint(format!(
                "tensor {} has shape {:?} in the checkpoint but {:?} in the model",
                entry.name,
                t.shape(),
                entry.value.shape()
            )));
        }
        entry.value = t.clone();
    }
    Ok(())
}
