//! Binary checkpoint file.
//!
//! ```text
//! magic "FILMWCKP" | version u32
//! metadata: len u64 | UTF-8 JSON
//! params:   count u64 | { name_len u32 | name | ndim u32 | dims u64.. | f32 LE payload }
//! buffers:  same layout as params (batch-norm running statistics)
//! optimizer flag u8 | (step u64 | lr β1 β2 ε wd as f64 | per param: m payload, v payload)
//! ```
//! All integers little-endian. Saving a loaded checkpoint reproduces the
//! input bytes exactly.

use std::collections::HashSet;
use std::path::Path;

use super::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FILMWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// JSON text, kept verbatim so round trips are byte-exact.
    pub metadata: String,
    pub params: Vec<(String, Tensor<f32>)>,
    /// Non-trainable state; no optimizer moments.
    pub buffers: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<AdamState<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(detail.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| corrupt("length overflow"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("payload overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_entries(out: &mut Vec<u8>, entries: &[(String, Tensor<f32>)]) {
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_floats(out, t.data());
    }
}

fn read_entries(r: &mut Reader<'_>, seen: &mut HashSet<String>) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = r.len()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("entry name is not UTF-8"))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(corrupt(format!("duplicate entry {name}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflow"))?;
        let data = r.floats(numel)?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        put_entries(&mut out, &self.params);
        put_entries(&mut out, &self.buffers);
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                let c = st.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for (m, v) in st.m.iter().zip(&st.v) {
                    put_floats(&mut out, m.data());
                    put_floats(&mut out, v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let meta_len = r.len()?;
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| corrupt("metadata is not UTF-8"))?
            .to_owned();
        serde_json::from_str::<serde_json::Value>(&metadata)
            .map_err(|e| corrupt(format!("metadata is not JSON: {e}")))?;
        let mut seen = HashSet::new();
        let params = read_entries(&mut r, &mut seen)?;
        let buffers = read_entries(&mut r, &mut seen)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (_, p) in &params {
                    m.push(Tensor::new(p.shape().to_vec(), r.floats(p.numel())?)?);
                    v.push(Tensor::new(p.shape().to_vec(), r.floats(p.numel())?)?);
                }
                Some(AdamState { config, step, m, v })
            }
            f => return Err(corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            metadata,
            params,
            buffers,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn metadata_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_str(&self.metadata)?)
    }
}
