//! Binary tensor-blob container.
//!
//! Every blob is: 8-byte magic, one dtype byte, one rank byte, `rank`
//! little-endian u32 extents, then the row-major little-endian payload.
//! Scene and vocabulary files store f32 payloads; checkpoints store f64 so
//! training state restores bit-exactly.

use crate::error::{Error, Result};
use crate::tape::Tensor;

pub const BLOB_MAGIC: &[u8; 8] = b"SCTCTNSR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn write_blob(out: &mut Vec<u8>, tensor: &Tensor, dtype: Dtype) {
    out.extend_from_slice(BLOB_MAGIC);
    out.push(dtype.code());
    out.push(tensor.shape.len() as u8);
    for &e in &tensor.shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in &tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Cursor over a byte buffer that reports absolute offsets in parse errors.
pub struct BlobReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize, field: &str, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated {what} in tensor '{field}'"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Read one blob, checking magic and (when given) the expected dtype.
    pub fn read_blob(&mut self, field: &str, expect: Option<Dtype>) -> Result<Tensor> {
        let start = self.pos;
        let magic = self.take(8, field, "magic")?;
        if magic != BLOB_MAGIC {
            return Err(Error::Parse {
                offset: start,
                msg: format!("bad magic for tensor '{field}'"),
            });
        }
        let code = self.take(1, field, "dtype byte")?[0];
        let dtype = Dtype::from_code(code).ok_or_else(|| Error::Parse {
            offset: self.pos - 1,
            msg: format!("unknown dtype {code} in tensor '{field}'"),
        })?;
        if let Some(want) = expect {
            if dtype != want {
                return Err(Error::Parse {
                    offset: self.pos - 1,
                    msg: format!("tensor '{field}' has dtype {dtype:?}, expected {want:?}"),
                });
            }
        }
        let rank = self.take(1, field, "rank byte")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let bytes = self.take(4, field, "extent")?;
            shape.push(u32::from_le_bytes(bytes.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = self.take(numel * dtype.width(), field, "payload")?;
        let data = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Tensor { shape, data })
    }
}

/// Quantize to f32 precision so an f32 blob round-trips exactly.
pub fn quantize_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}
