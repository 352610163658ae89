//! Binary weight container.
//!
//! ```text
//! magic      4 bytes  "DCKP"
//! version    u8       1
//! header_len u32      length of the UTF-8 header that follows
//! header     bytes    key=value lines (network config, normalization stats)
//! count      u32      number of tensor entries
//! entry      repeated `count` times:
//!   name_len u16
//!   name     bytes (UTF-8)
//!   dtype    u8       1 = f32, 2 = f64
//!   rank     u8
//!   extents  rank x u32
//!   payload  product(extents) little-endian values of `dtype`
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{lit, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub header: String,
    pub entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(F::DTYPE as u8);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a container, converting payloads to `F` if they were stored at another precision.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "bad magic, expected DCKP"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = r.u32()? as usize;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| Error::format(origin, "header is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(origin, "entry name is not UTF-8"))?;
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::format(origin, format!("unknown dtype code {code}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size())?;
            let data: Vec<F> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| lit(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format(origin, format!("entry `{name}`: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
