//! Versioned checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "UWCK" | u32 version | u32 len + canonical config JSON | u64 step
//! u32 count | count × (u16 len + name | u8 ndim | ndim × u32 | f32 data)
//! u8 has_optimizer [u64 step | per parameter: f32 m, f32 v]
//! u32 len + trainer metadata JSON (may be empty)
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::ModelError;
use crate::autodiff::optim::Moments;
use crate::autodiff::{AdamWState, Tensor};
use crate::image::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    pub step: u64,
    /// Trainer state needed to resume (canonical JSON), empty if none.
    pub meta: String,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore<f32>) -> Result<Self, ModelError> {
        params.check(&config)?;
        Ok(Self {
            config,
            params,
            optimizer: None,
            step: 0,
            meta: String::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_blob(&mut out, self.config.to_canonical_json().as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        match &self.optimizer {
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for m in &state.moments {
                    put_floats(&mut out, m.m.data());
                    put_floats(&mut out, m.v.data());
                }
            }
            None => out.push(0),
        }
        put_blob(&mut out, self.meta.as_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |reason: &str| ModelError::Checkpoint(reason.to_string());
        if bytes.len() < 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (missing UWCK header)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file is corrupt or truncated)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config: ModelConfig =
            serde_json::from_slice(r.blob()?).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
            let ndim = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n = shape.iter().product();
            let data = r.floats(n)?;
            pairs.push((name, Tensor::new(&shape, data)?));
        }
        let params = ParamStore::from_named(pairs)?;
        params.check(&config)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let ostep = r.u64()?;
                let mut moments = Vec::with_capacity(params.len());
                for t in params.tensors() {
                    let m = Tensor::new(t.shape(), r.floats(t.len())?)?;
                    let v = Tensor::new(t.shape(), r.floats(t.len())?)?;
                    moments.push(Moments { m, v });
                }
                Some(AdamWState { step: ostep, moments })
            }
            _ => return Err(bad("invalid optimizer flag")),
        };
        let meta = String::from_utf8(r.blob()?.to_vec()).map_err(|_| bad("metadata is not UTF-8"))?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes after metadata"));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            step,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes()).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ModelError::Checkpoint(reason) => ModelError::Checkpoint(format!("{}: {reason}", path.display())),
            other => other,
        })
    }
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8], ModelError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
