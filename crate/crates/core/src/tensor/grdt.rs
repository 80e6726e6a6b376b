//! GRDT binary tensor files and named multi-tensor containers.
//!
//! A tensor record is: magic `GRDT`, `u8` version (1), `u8` dtype (0 = f32,
//! 1 = f64, 2 = u8), `u8` ndim, `u8` reserved (0), `ndim` little-endian `u32`
//! extents, then the row-major little-endian payload. A container is a
//! sequence of `u32` little-endian name length, UTF-8 name, tensor record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"GRDT";
pub const VERSION: u8 = 1;

/// Payload of a GRDT record.
#[derive(Clone, Debug, PartialEq)]
pub enum GrdtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

/// Dtype-erased tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct GrdtTensor {
    pub shape: Vec<usize>,
    pub data: GrdtData,
}

impl GrdtTensor {
    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("GrdtTensor::u8", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data: GrdtData::U8(data),
        })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            GrdtData::F32(_) => DType::F32,
            GrdtData::F64(_) => DType::F64,
            GrdtData::U8(_) => DType::U8,
        }
    }

    /// Converts any payload to a float tensor of element type `T`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data: Vec<T> = match &self.data {
            GrdtData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap()).collect(),
            GrdtData::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap()).collect(),
            GrdtData::U8(v) => v.iter().map(|&x| T::from_u8(x).unwrap()).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("validated on construction")
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            GrdtData::U8(v) => Some(v),
            _ => None,
        }
    }
}

impl<T: Element> From<&Tensor<T>> for GrdtTensor {
    fn from(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => GrdtData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            _ => GrdtData::F64(t.data().iter().map(|v| v.to_f64().unwrap()).collect()),
        };
        Self {
            shape: t.shape().to_vec(),
            data,
        }
    }
}

pub fn encode(t: &GrdtTensor, out: &mut Vec<u8>) -> Result<()> {
    if t.shape.len() > u8::MAX as usize {
        return Err(Error::Usage(format!("GRDT supports at most 255 dims, got {}", t.shape.len())));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, t.dtype() as u8, t.shape.len() as u8, 0]);
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::Usage(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        GrdtData::F32(v) => v.iter().for_each(|x| x.write_le(out)),
        GrdtData::F64(v) => v.iter().for_each(|x| x.write_le(out)),
        GrdtData::U8(v) => out.extend_from_slice(v),
    }
    Ok(())
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(GrdtTensor, usize)> {
    let bad = |r: &str| Error::format(path, r);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing GRDT magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_tag(bytes[5]).ok_or_else(|| bad(&format!("unknown dtype {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(bad("reserved byte must be 0"));
    }
    let mut pos = 8;
    if bytes.len() < pos + 4 * ndim {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()) as usize)
        .collect();
    pos += 4 * ndim;
    let n = numel(&shape);
    let size = n * dtype.size();
    if bytes.len() < pos + size {
        return Err(bad("truncated payload"));
    }
    let payload = &bytes[pos..pos + size];
    let data = match dtype {
        DType::F32 => GrdtData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
        DType::F64 => GrdtData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
        DType::U8 => GrdtData::U8(payload.to_vec()),
    };
    Ok((GrdtTensor { shape, data }, pos + size))
}

pub fn write(path: impl AsRef<Path>, t: &GrdtTensor) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    fs::write(path.as_ref(), buf).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read(path: impl AsRef<Path>) -> Result<GrdtTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn encode_named(records: &[(String, GrdtTensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for (name, t) in records {
        let len = u32::try_from(name.len()).map_err(|_| Error::Usage("record name too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        encode(t, &mut buf)?;
    }
    Ok(buf)
}

pub fn decode_named(bytes: &[u8], path: &Path) -> Result<Vec<(String, GrdtTensor)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() < pos + 4 {
            return Err(Error::format(path, "truncated record name length"));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::format(path, "truncated record name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::format(path, "record name is not UTF-8"))?;
        pos += len;
        let (t, used) = decode(&bytes[pos..], path)?;
        pos += used;
        out.push((name, t));
    }
    Ok(out)
}

/// Writes a named multi-tensor container.
pub fn write_named(path: impl AsRef<Path>, records: &[(String, GrdtTensor)]) -> Result<()> {
    let buf = encode_named(records)?;
    fs::write(path.as_ref(), buf).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_named(path: impl AsRef<Path>) -> Result<Vec<(String, GrdtTensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_named(&bytes, path)
}
