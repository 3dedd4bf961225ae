//! Binary checkpoint: parameters plus AdamW moments and the step counter.
//!
//! Layout (little-endian): magic `PCCKPT\0\0`, u32 version, u64 step,
//! u64 config hash, u32-length metadata string, u32 parameter count, then
//! per parameter a u32-length name, u32 rank, u64 dims and three f64 blocks
//! (value, first moment, second moment).

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::{Array, NumericsError, ParameterStore};

const MAGIC: &[u8; 8] = b"PCCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub value: Array,
    pub m: Array,
    pub v: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    /// Free-form metadata, conventionally the run configuration as JSON.
    pub metadata: String,
    pub params: Vec<CheckpointParam>,
}

/// First eight bytes of SHA-256 over `text`.
pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(store: &ParameterStore, metadata: &str) -> Self {
        Self {
            step: store.step(),
            config_hash: config_hash(metadata),
            metadata: metadata.to_string(),
            params: store
                .params()
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    m: p.m.clone(),
                    v: p.v.clone(),
                })
                .collect(),
        }
    }

    /// Copies values, moments and step into a store with identical layout.
    pub fn restore_into(&self, store: &mut ParameterStore) -> Result<(), NumericsError> {
        if store.len() != self.params.len() {
            return Err(err(format!(
                "parameter count {} does not match model ({})",
                self.params.len(),
                store.len()
            )));
        }
        for (p, dst) in self.params.iter().zip(store.params_mut()) {
            if p.name != dst.name || p.value.shape() != dst.value.shape() {
                return Err(err(format!(
                    "parameter `{}` {:?} does not match model `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = p.value.clone();
            dst.m = p.m.clone();
            dst.v = p.v.clone();
            dst.grad = Array::zeros(p.value.shape());
        }
        store.set_step(self.step);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.config_hash.to_le_bytes());
        put_str(&mut buf, &self.metadata);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut buf, &p.name);
            let shape = p.value.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for a in [&p.value, &p.m, &p.v] {
                for x in a.data() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NumericsError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| err(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let step = cur.u64()?;
        let config_hash = cur.u64()?;
        let metadata = cur.string()?;
        let count = cur.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut block = || -> Result<Array, NumericsError> {
                let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?;
                Array::from_vec(&shape, data)
            };
            let value = block()?;
            let m = block()?;
            let v = block()?;
            params.push(CheckpointParam { name, value, m, v });
        }
        if cur.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self { step, config_hash, metadata, params })
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NumericsError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NumericsError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("invalid utf-8"))
    }
}
