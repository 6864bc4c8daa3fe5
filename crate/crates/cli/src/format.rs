//! Binary tensor records.
//!
//! Each record is the magic `SRCK1\0`, a little-endian `u32` rank, `rank`
//! `u64` dimensions, a `u8` dtype tag (1 = f32, 2 = f64), the row-major
//! little-endian payload and a trailing `u64` CRC-64/XZ of the payload.
//! A file holds one or more records back to back.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use ndarray::{Array1, Array2, ArrayD, IxDyn};

use source_core::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SRCK1\0";
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

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

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Tensor {
            dims: vec![a.len()],
            data: TensorData::F64(a.to_vec()),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor {
            dims: vec![a.nrows(), a.ncols()],
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_bools(flags: &[bool]) -> Self {
        Tensor {
            dims: vec![flags.len()],
            data: TensorData::F64(flags.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
        }
    }

    pub fn values_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!("expected rank 1, found rank {}", self.dims.len())));
        }
        Ok(Array1::from(self.values_f64()))
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!("expected rank 2, found rank {}", self.dims.len())));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.values_f64())
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_arrayd(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.values_f64()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(self.data.tag());
        let start = out.len();
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = CRC64.checksum(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated record: missing {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        t.encode_into(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let at = cur.pos;
        if cur.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format(format!("bad magic at byte {at}")));
        }
        let rank = u32::from_le_bytes(cur.take(4, "rank")?.try_into().expect("4 bytes")) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(cur.u64("dimension")?).map_err(|_| Error::Format("dimension overflows usize".into()))?);
        }
        let tag = cur.take(1, "dtype")?[0];
        let width = match tag {
            1 => 4,
            2 => 8,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(width))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let payload = cur.take(count, "payload")?;
        let stored = cur.u64("checksum")?;
        let computed = CRC64.checksum(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let data = if tag == 1 {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
        } else {
            TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
        };
        out.push(Tensor { dims, data });
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads exactly `n` tensors from a file.
pub fn read_n(path: &Path, n: usize) -> Result<Vec<Tensor>> {
    let t = read_tensors(path)?;
    if t.len() != n {
        return Err(Error::Format(format!(
            "{} holds {} tensors, expected {n}",
            path.display(),
            t.len()
        )));
    }
    Ok(t)
}
