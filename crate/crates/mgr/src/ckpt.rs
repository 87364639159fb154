//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic              8 bytes  "MGRCKPT\0"
//! version            u32
//! dtype              u8       1 = f32, 2 = f64 (run precision)
//! step               u64      completed optimizer steps
//! optim_step         u64      optimizer bias-correction counter
//! rng_state          u64      data-sampling generator state
//! loss_window_len    u32      trailing train losses for the moving average
//! loss_window        f64 * len
//! config_len         u32
//! config_text        utf-8 bytes (fully resolved run configuration)
//! tensor_count       u32
//! per tensor:        name_len u16, name bytes, dtype u8, ndim u8,
//!                    dims u32 * ndim, offset u64 (into payload)
//! payload            concatenated tensor values
//! ```
//!
//! Save -> load -> save is byte-identical: entry order is preserved and
//! every field is written explicitly.

use crate::error::{MgrError, Result};
use crate::tensor::{Real, Tensor};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MGRCKPT\0";
pub const VERSION: u32 = 1;

pub struct Checkpoint<F: Real> {
    pub step: u64,
    pub optim_step: u64,
    pub rng_state: u64,
    pub loss_window: Vec<f64>,
    pub config_text: String,
    /// Model parameters first, then optimizer state, in deterministic order.
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(F::DTYPE);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.optim_step.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&(self.loss_window.len() as u32).to_le_bytes());
        for v in &self.loss_window {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(F::DTYPE);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.numel() * F::BYTES) as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(MgrError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MgrError::Format(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let dtype = r.u8()?;
        if dtype != F::DTYPE {
            return Err(MgrError::Format(format!(
                "checkpoint precision tag {dtype} does not match the run precision tag {}",
                F::DTYPE
            )));
        }
        let step = r.u64()?;
        let optim_step = r.u64()?;
        let rng_state = r.u64()?;
        let window_len = r.u32()? as usize;
        let mut loss_window = Vec::with_capacity(window_len);
        for _ in 0..window_len {
            let b = r.take(8)?;
            loss_window.push(f64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ]));
        }
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| MgrError::Format("config block is not utf-8".into()))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| MgrError::Format("tensor name is not utf-8".into()))?;
            let dt = r.u8()?;
            if dt != F::DTYPE {
                return Err(MgrError::Format(format!(
                    "tensor '{name}' has dtype tag {dt}, expected {}",
                    F::DTYPE
                )));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in table {
            let numel: usize = shape.iter().product();
            let need = offset + numel * F::BYTES;
            if need > payload.len() {
                return Err(MgrError::Format(format!(
                    "tensor '{name}' payload out of bounds ({need} > {})",
                    payload.len()
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                data.push(F::read_le(&payload[offset + i * F::BYTES..]));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { step, optim_step, rng_state, loss_window, config_text, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            MgrError::Format(format!("cannot read checkpoint '{}': {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MgrError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// FNV-1a hash of a byte stream (used as checkpoint/config identifiers).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
