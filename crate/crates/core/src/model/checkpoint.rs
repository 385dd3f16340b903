//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "APVT" | version: u32
//! repeated: name_len: u32 | name | rank: u32 | dims: u32 * rank | f64 * prod(dims)
//! total: u64   (number of bytes before this field)
//! ```
//!
//! Tensors appear in the canonical order of [`ApvitParams::for_each`].

use std::fs;
use std::path::Path;

use super::{ApvitConfig, ApvitParams};
use crate::error::{ApvitError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"APVT";
const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &ApvitParams<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    params.for_each(|name, t| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    });
    let total = buf.len() as u64;
    buf.extend_from_slice(&total.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ApvitError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint and checks it against the layout `config` implies.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], config: &ApvitConfig) -> Result<ApvitParams<T>> {
    if bytes.len() < 16 {
        return Err(ApvitError::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let declared = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if declared != body.len() as u64 {
        return Err(ApvitError::Checkpoint(format!(
            "length field says {declared} bytes, found {} (truncated or corrupt)",
            body.len()
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ApvitError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ApvitError::Checkpoint(format!("unsupported version {version}")));
    }

    let mut loaded = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ApvitError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        loaded.push((name, Tensor::new(shape, data)?));
    }

    let mut params = ApvitParams::<T>::zeros(config)?;
    let mut it = loaded.into_iter();
    let mut err = None;
    params.for_each_mut(|name, t| {
        if err.is_some() {
            return;
        }
        match it.next() {
            Some((n, v)) if n == name && v.shape() == t.shape() => *t = v,
            Some((n, v)) => {
                err = Some(format!(
                    "expected {name} {:?}, found {n} {:?}",
                    t.shape(),
                    v.shape()
                ))
            }
            None => err = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(e) = err {
        return Err(ApvitError::Checkpoint(e));
    }
    if let Some((n, _)) = it.next() {
        return Err(ApvitError::Checkpoint(format!("unexpected extra tensor {n}")));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ApvitParams<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| ApvitError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, config: &ApvitConfig) -> Result<ApvitParams<T>> {
    let bytes = fs::read(path).map_err(|e| ApvitError::io(path, e))?;
    decode_checkpoint(&bytes, config)
}
