//! LPCK checkpoint files.
//!
//! Layout (little-endian): `"LPCK"`, `u32` version (1), `u32` tensor count,
//! `u32` flags (bit 0: optimizer state present), then per tensor `u16` name
//! length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u8` rank, `u32` dims
//! and the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const VERSION: u32 = 1;
pub const FLAG_OPTIMIZER: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
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

/// Tensor values held as `f64`; `dtype` is the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_values(name: impl Into<String>, dtype: Dtype, shape: &[usize], data: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
            data: data.to_vec(),
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::from_values(name, Dtype::F64, &[], &[value])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub has_optimizer: bool,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Checkpoint {
            tensors,
            has_optimizer: false,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor named {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        match t.data[..] {
            [v] => Ok(v),
            _ => Err(Error::Config(format!("checkpoint tensor {name} is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        let flags = if self.has_optimizer { FLAG_OPTIMIZER } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::invalid(format!("tensor {} shape and data disagree", t.name)));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype as u8);
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::invalid("tensor dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match t.dtype {
                Dtype::F32 => t.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                Dtype::F64 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not an LPCK checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("LPCK version {version}")));
        }
        let count = r.u32("tensor count")?;
        let flags = r.u32("flags")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let at = r.pos;
            let dtype = Dtype::from_code(r.u8("dtype")?).ok_or(Error::Format {
                offset: at as u64,
                message: "unknown dtype".into(),
            })?;
            let rank = r.u8("rank")?;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Format {
                offset: r.pos as u64,
                message: "tensor size overflows".into(),
            })?;
            let payload = r.take(n.saturating_mul(dtype.width()), "payload")?;
            let data = match dtype {
                Dtype::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes after last tensor".into(),
            });
        }
        Ok(Checkpoint {
            tensors,
            has_optimizer: flags & FLAG_OPTIMIZER != 0,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
