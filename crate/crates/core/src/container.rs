//! Versioned binary container shared by model, classifier and profile files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! <format string>\n
//! u32 header_len, header_len bytes of JSON
//! u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!             u8 ndim, ndim × u64 dims, prod(dims) values
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{format_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub format: String,
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.format.as_bytes());
        out.push(b'\n');
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            match &t.data {
                TensorData::F32(_) => out.push(0),
                TensorData::F64(_) => out.push(1),
            }
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], expected_format: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let nl = bytes
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(0, "missing format line"))?;
        let format = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err(0, "format line is not UTF-8"))?;
        if format != expected_format {
            return Err(format_err(0, format!("expected format '{expected_format}', found '{format}'")));
        }
        r.pos = nl + 1;
        let header_len = r.u32()? as usize;
        let at = r.pos as u64;
        let header = serde_json::from_slice(r.take(header_len)?).map_err(|e| format_err(at, format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err(at, "tensor name not UTF-8"))?;
            let at = r.pos as u64;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format_err(at, "tensor shape overflows"))?;
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| format_err(at, "tensor too large"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| format_err(at, "tensor too large"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(format_err(at, format!("unknown dtype {other} for tensor '{name}'"))),
            };
            debug_assert_eq!(data.len(), n);
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Self {
            format: format.to_string(),
            header,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, expected_format: &str) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, expected_format)
    }
}

/// Cursor over a byte slice that reports the offset of any short read.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(format_err(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
