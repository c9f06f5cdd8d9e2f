//! Named-tensor binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ASHW" | version u32 | count u32
//! count x { name_len u32 | name utf-8 | dtype u8 (1 = f32, 2 = f64)
//!           | ndim u32 | dims u32 x ndim | values }
//! ```

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ASHW";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

pub fn encode(tensors: &[NamedTensor], precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::invalid(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(precision.code());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            match precision {
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("weight archive", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let ctx = "weight archive";
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(ctx, "bad magic"));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Version {
            context: ctx.into(),
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(ctx, "tensor name not utf-8"))?;
        let precision = match r.take(1)?[0] {
            1 => Precision::F32,
            2 => Precision::F64,
            other => return Err(Error::format(ctx, format!("tensor {name}: unknown dtype {other}"))),
        };
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::format(ctx, format!("tensor {name}: shape overflow")))?;
        let raw = r.take(
            n.checked_mul(precision.width())
                .ok_or_else(|| Error::format(ctx, "size overflow"))?,
        )?;
        let data = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        out.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(ctx, "trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Looks up a tensor by name and checks its shape.
pub fn take_tensor(tensors: &[NamedTensor], name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::format("weight archive", format!("missing tensor {name}")))?;
    if t.shape != shape {
        return Err(Error::format(
            "weight archive",
            format!("tensor {name}: expected shape {shape:?}, found {:?}", t.shape),
        ));
    }
    Ok(t.data.clone())
}
