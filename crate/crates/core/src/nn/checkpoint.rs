//! `PDEN-CKPT-1` container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PDEN-CKPT-1\n"                      12 bytes
//! manifest length                      u64
//! manifest                             UTF-8 JSON
//! tensor count                         u32
//! per tensor:
//!   name length, name                  u32, UTF-8
//!   rank, dims                         u32, rank × u64
//!   values                             product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CycleGenerator, GenArch, Generator, ParamSet, TaskArch, TaskModel};
use crate::error::{PdenError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"PDEN-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// `task_model`, `generator` or `cycle_generator`.
    pub kind: String,
    pub arch: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    /// Free-form run information (loss weights, phase, domain index).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamSet,
}

impl Checkpoint {
    fn new(kind: &str, arch: serde_json::Value, params: ParamSet, seed: u64, step: u64) -> Self {
        Self {
            manifest: CheckpointManifest {
                format: "PDEN-CKPT-1".into(),
                kind: kind.into(),
                arch,
                seed,
                step,
                extra: serde_json::Value::Null,
            },
            params,
        }
    }

    pub fn from_task(model: &TaskModel, seed: u64, step: u64) -> Self {
        let arch = serde_json::to_value(&model.arch).expect("arch serializes");
        Self::new("task_model", arch, model.params.clone(), seed, step)
    }

    pub fn from_generator(g: &Generator, seed: u64, step: u64) -> Self {
        let arch = serde_json::to_value(&g.arch).expect("arch serializes");
        Self::new("generator", arch, g.params.clone(), seed, step)
    }

    pub fn from_cycle(g: &CycleGenerator, seed: u64, step: u64) -> Self {
        let arch = serde_json::to_value(&g.arch).expect("arch serializes");
        Self::new("cycle_generator", arch, g.params.clone(), seed, step)
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> Self {
        self.manifest.extra = extra;
        self
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(PdenError::Format(format!(
                "checkpoint holds a {}, expected a {kind}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    pub fn to_task(&self) -> Result<TaskModel> {
        self.expect_kind("task_model")?;
        let arch: TaskArch = serde_json::from_value(self.manifest.arch.clone())?;
        TaskModel::from_params(arch, self.params.clone())
    }

    pub fn to_generator(&self) -> Result<Generator> {
        self.expect_kind("generator")?;
        let arch: GenArch = serde_json::from_value(self.manifest.arch.clone())?;
        Generator::from_params(arch, self.params.clone())
    }

    pub fn to_cycle(&self) -> Result<CycleGenerator> {
        self.expect_kind("cycle_generator")?;
        let arch: GenArch = serde_json::from_value(self.manifest.arch.clone())?;
        CycleGenerator::from_params(arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(64 + manifest.len() + self.params.scalar_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(PdenError::Format(format!(
                "bad checkpoint header {:?}, expected PDEN-CKPT-1",
                String::from_utf8_lossy(magic)
            )));
        }
        let mlen = r.u64()? as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(r.take(mlen)?)?;
        if manifest.format != "PDEN-CKPT-1" {
            return Err(PdenError::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format
            )));
        }
        let count = r.u32()?;
        let mut params = ParamSet::default();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| PdenError::Format("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| PdenError::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(PdenError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PdenError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
