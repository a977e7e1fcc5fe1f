//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SKIPMID1"
//! u64 header length, header bytes (UTF-8, sorted `key = value` lines)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, rank x u64 dims,
//!             product(dims) x f32
//! ```
//!
//! Parameter tensors are stored in [`Parameters::named`] order. Training
//! checkpoints append optimizer moments after them.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Parameters;
use crate::{Element, Error, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"SKIPMID1";

/// Header text plus named 32-bit tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_len(r: &mut impl Read, what: &str, limit: u64) -> Result<usize> {
    let n = u64::from_le_bytes(read_exact::<8>(r)?);
    if n > limit {
        return Err(Error::Format(format!("{what} length {n} exceeds {limit}")));
    }
    Ok(n as usize)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format(format!("truncated checkpoint: wanted {n} bytes, got {}", buf.len())));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.numel());
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<8>(r)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let hlen = read_len(r, "header", 1 << 24)?;
        let header = String::from_utf8(read_bytes(r, hlen)?)
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_len(r, "dimension", 1 << 32)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} too large")))?;
            let bytes = read_bytes(r, 4 * numel)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Stores every parameter tensor (cast to `f32`) in canonical order.
    pub fn from_parameters<T: Element>(header: String, params: &Parameters<T>) -> Self {
        let tensors = params.named().into_iter().map(|(n, t)| (n, t.cast())).collect();
        Checkpoint { header, tensors }
    }

    /// Removes and returns the tensors named like `template`'s parameters.
    /// Missing tensors and shape differences are config mismatches.
    pub fn take_parameters<T: Element>(&mut self, mut template: Parameters<T>) -> Result<Parameters<T>> {
        let mut by_name: BTreeMap<String, Tensor<f32>> = std::mem::take(&mut self.tensors).into_iter().collect();
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(template.tensors_mut()) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint has no tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: checkpoint shape {:?}, config wants {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
        }
        self.tensors = by_name.into_iter().collect();
        Ok(template)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }
}
