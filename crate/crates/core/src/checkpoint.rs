//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GZSTCKPT" | version u32
//! config   : u32 length + UTF-8 JSON
//! stage    : u8
//! seeds    : u32 count + (name, u64)*
//! metrics  : u32 count + (name, f64)*
//! tensors  : u32 count + (name, decay u8, rows u64, cols u64, f64 * rows*cols)*
//! ```
//!
//! Names are a u32 length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"GZSTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    pub seeds: BTreeMap<String, u64>,
    pub metrics: BTreeMap<String, f64>,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seeds: BTreeMap<String, u64>, metrics: BTreeMap<String, f64>) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            stage: model.stage(),
            seeds,
            metrics,
            store: model.store.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_store(self.config, self.store, self.stage)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.config)?.as_bytes());
        out.push(self.stage as u8);
        put_u32(&mut out, self.seeds.len());
        for (k, v) in &self.seeds {
            put_bytes(&mut out, k.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.metrics.len());
        for (k, v) in &self.metrics {
            put_bytes(&mut out, k.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.store.len());
        for (name, t) in self.store.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.push(u8::from(t.decay));
            let (r, c) = t.value.dim();
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            for v in t.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let config: ModelConfig = serde_json::from_str(&r.string()?)?;
        let stage = Stage::from_u8(r.take(1)?[0]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut seeds = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            seeds.insert(k, r.u64()?);
        }
        let mut metrics = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            metrics.insert(k, f64::from_bits(r.u64()?));
        }
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let decay = r.take(1)?[0] != 0;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` overruns the file")))?;
            let values = (0..n)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let value = Mat::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.insert(name, value, decay);
        }
        store.set_trainable(|n| stage.trains(n));
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            config,
            stage,
            seeds,
            metrics,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
