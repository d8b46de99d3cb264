//! Binary delta checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "FALD" | version: u16 | { rows: u32 | cols: u32 | rows*cols f64 }* | gamma: f64
//! ```
//!
//! An adapter record holds two matrices (`A` then `B`) and its scale; a
//! dense record holds one matrix and `gamma = 1`. The trailing eight bytes
//! are always the scale, so the matrix count is implied by the length.

use super::{DenseDelta, LoraDelta};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

pub const MAGIC: &[u8; 4] = b"FALD";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FaldRecord {
    pub matrices: Vec<Matrix<f64>>,
    pub gamma: f64,
}

pub fn encode_record(record: &FaldRecord) -> Vec<u8> {
    let payload: usize = record.matrices.iter().map(|m| 8 + 8 * m.rows() * m.cols()).sum();
    let mut out = Vec::with_capacity(6 + payload + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for m in &record.matrices {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&record.gamma.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<FaldRecord> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut matrices = Vec::new();
    while r.remaining() > 8 {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("matrix header {rows}x{cols} has a zero dimension")));
        }
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("matrix header overflows".into()))?;
        if need + 8 > r.remaining() {
            return Err(Error::Format(format!(
                "header {rows}x{cols} needs {need} payload bytes but only {} remain before the scale",
                r.remaining().saturating_sub(8)
            )));
        }
        let values = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let m = Matrix::new(rows, cols, values).map_err(|e| Error::Format(e.to_string()))?;
        matrices.push(m);
    }
    let gamma = r.f64()?;
    if matrices.is_empty() {
        return Err(Error::Format("record holds no matrices".into()));
    }
    Ok(FaldRecord { matrices, gamma })
}

pub fn encode_lora<T: Scalar>(delta: &LoraDelta<T>) -> Vec<u8> {
    encode_record(&FaldRecord { matrices: vec![delta.a().cast(), delta.b().cast()], gamma: delta.gamma().as_f64() })
}

pub fn decode_lora<T: Scalar>(bytes: &[u8]) -> Result<LoraDelta<T>> {
    let rec = decode_record(bytes)?;
    let [a, b]: [Matrix<f64>; 2] = rec
        .matrices
        .try_into()
        .map_err(|m: Vec<_>| Error::Format(format!("adapter record needs 2 matrices, found {}", m.len())))?;
    LoraDelta::new(a.cast(), b.cast(), T::of(rec.gamma)).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_dense<T: Scalar>(delta: &DenseDelta<T>) -> Vec<u8> {
    encode_record(&FaldRecord { matrices: vec![delta.matrix().cast()], gamma: 1.0 })
}

pub fn decode_dense<T: Scalar>(bytes: &[u8]) -> Result<DenseDelta<T>> {
    let rec = decode_record(bytes)?;
    let [w]: [Matrix<f64>; 1] = rec
        .matrices
        .try_into()
        .map_err(|m: Vec<_>| Error::Format(format!("dense record needs 1 matrix, found {}", m.len())))?;
    Ok(DenseDelta::new(w.cast()))
}
