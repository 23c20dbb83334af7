//! The AGN1 checkpoint container.
//!
//! All integers are little-endian. Layout: magic `AGN1`, version `u32`,
//! record count `u32`, then per record the name length `u32`, UTF-8 name,
//! rank `u32`, dims `u64` each and row-major `f64` values. A `u32`
//! length-prefixed JSON metadata blob closes the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AgeNet, ModelSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub model: ModelSpec,
    pub best_val_mae: f64,
    /// 1-based epoch the parameters were recorded after.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &AgeNet, config: RunConfig, best_val_mae: f64, epoch: usize) -> Self {
        Checkpoint {
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            meta: CheckpointMeta {
                config,
                model: model.spec.clone(),
                best_val_mae,
                epoch,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.params.len(), "record count")?;
        for (name, t) in &self.params {
            put_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank(), "rank")?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::invalid(format!("metadata: {e}")))?;
        put_u32(&mut out, meta.len(), "metadata length")?;
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path };
        let magic = c.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, format!("bad magic {magic:?}, expected \"AGN1\"")));
        }
        let version = c.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let count = c.u32("record count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "name")?)
                .map_err(|_| Error::format(path, format!("record {i}: name is not UTF-8")))?
                .to_string();
            let rank = c.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let d = c.u64("dims")?;
                shape.push(usize::try_from(d).map_err(|_| Error::format(path, format!("`{name}`: dim {d} too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(path, format!("`{name}`: shape {shape:?} overflows")))?;
            let data = c
                .take(numel, "values")?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        let len = c.u32("metadata length")? as usize;
        let meta = serde_json::from_slice(c.take(len, "metadata")?)
            .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        if c.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(Checkpoint { params, meta })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model and installs every stored parameter by name.
    pub fn to_model(&self) -> Result<AgeNet> {
        let mut model = AgeNet::new(self.meta.model.clone(), 0)?;
        let mut seen = vec![false; model.store.len()];
        let mut values = model.store.tensors();
        for (name, t) in &self.params {
            let Some(id) = model.store.id_of(name) else {
                return Err(Error::invalid(format!("checkpoint has unknown parameter `{name}`")));
            };
            let i = model
                .store
                .names()
                .position(|n| n == name)
                .expect("id_of found it");
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("parameter `{name}` stored twice")));
            }
            if model.store.get(id).shape() != t.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{name}` is {:?} in the model, {:?} in the file", model.store.get(id).shape(), t.shape()),
                ));
            }
            values[i] = t.clone();
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = model.store.names().nth(i).expect("in range");
            return Err(Error::invalid(format!("checkpoint is missing parameter `{name}`")));
        }
        model.store.set_all(values)?;
        Ok(model)
    }
}
