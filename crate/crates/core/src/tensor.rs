//! TNSR: a minimal binary tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic   b"TNSR"
//! offset 4   u8      version, currently 1
//! offset 5   u8      dtype code: 1 = f32, 2 = f64
//! offset 6   u8      rank
//! offset 7   u32 * rank   dims
//! then       row-major payload, dims product * dtype size bytes
//! ```
//!
//! The format is intentionally trivial to parse from any language. Feature
//! maps interchange as f32 (dtype 1); trained weights persist as f64
//! (dtype 2) so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u8 = 1;

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Element storage of a [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::F64(_) => DTYPE_F64,
        }
    }
}

/// A dense row-major tensor with explicit dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::check_dims(&dims, values.len())?;
        Ok(Tensor {
            dims,
            data: TensorData::F32(values),
        })
    }

    pub fn from_f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::check_dims(&dims, values.len())?;
        Ok(Tensor {
            dims,
            data: TensorData::F64(values),
        })
    }

    fn check_dims(dims: &[usize], len: usize) -> Result<()> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid_input(
                "tensor dims must be non-empty and positive",
            ));
        }
        let n: usize = dims.iter().product();
        if n != len {
            return Err(Error::invalid_input(format!(
                "dims {:?} imply {} elements, got {}",
                dims, n, len
            )));
        }
        Ok(())
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::F64(_) => Err(Error::invalid_input("tensor holds f64, expected f32")),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::F32(_) => Err(Error::invalid_input("tensor holds f32, expected f64")),
        }
    }

    /// Serialized byte size of this tensor.
    fn byte_len(&self) -> usize {
        let elem = match self.data {
            TensorData::F32(_) => 4,
            TensorData::F64(_) => 8,
        };
        7 + 4 * self.dims.len() + elem * self.data.len()
    }

    /// Encode into the TNSR byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype_code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decode from the TNSR byte layout, reporting the byte offset of the
    /// first malformed field on failure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(
                bytes.len() as u64,
                "truncated before end of magic",
            ));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"TNSR\""));
        }
        if bytes.len() < 5 {
            return Err(Error::format(4, "truncated before version byte"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {}", bytes[4]),
            ));
        }
        if bytes.len() < 6 {
            return Err(Error::format(5, "truncated before dtype byte"));
        }
        let dtype = bytes[5];
        let elem_size: usize = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => {
                return Err(Error::format(5, format!("unknown dtype code {}", other)));
            }
        };
        if bytes.len() < 7 {
            return Err(Error::format(6, "truncated before rank byte"));
        }
        let rank = bytes[6] as usize;
        if rank == 0 {
            return Err(Error::format(6, "rank must be at least 1"));
        }
        let dims_end = 7 + 4 * rank;
        if bytes.len() < dims_end {
            return Err(Error::format(bytes.len() as u64, "truncated inside dims"));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut n_elems: usize = 1;
        for i in 0..rank {
            let off = 7 + 4 * i;
            let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            if d == 0 {
                return Err(Error::format(off as u64, format!("dim {} is zero", i)));
            }
            n_elems = n_elems
                .checked_mul(d)
                .ok_or_else(|| Error::format(off as u64, "dims product overflows"))?;
            dims.push(d);
        }
        let payload = &bytes[dims_end..];
        let expected = n_elems
            .checked_mul(elem_size)
            .ok_or_else(|| Error::format(dims_end as u64, "payload size overflows"))?;
        if payload.len() < expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "payload truncated: expected {} bytes, got {}",
                    expected,
                    payload.len()
                ),
            ));
        }
        if payload.len() > expected {
            return Err(Error::format(
                (dims_end + expected) as u64,
                format!("{} trailing bytes after payload", payload.len() - expected),
            ));
        }
        let data = match dtype {
            DTYPE_F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DTYPE_F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => unreachable!(),
        };
        Ok(Tensor { dims, data })
    }
}

/// Write a tensor to `path` in TNSR format.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

/// Read a TNSR file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Tensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let mut b = Tensor::from_f32(vec![2], vec![1.0, 2.0])
            .unwrap()
            .to_bytes();
        b[0] = b'X';
        match Tensor::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected Format error, got {:?}", other),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        // Header declares 10 elements but only 9 are present.
        let t = Tensor::from_f32(vec![10], vec![0.5; 10]).unwrap();
        let mut b = t.to_bytes();
        b.truncate(b.len() - 4);
        match Tensor::from_bytes(&b) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("expected Format error, got {:?}", other),
        }
    }

    #[test]
    fn rejects_trailing_bytes() {
        let t = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = t.to_bytes();
        b.push(0);
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_unknown_dtype_and_version() {
        let t = Tensor::from_f32(vec![1], vec![1.0]).unwrap();
        let mut b = t.to_bytes();
        b[5] = 9;
        match Tensor::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected Format error, got {:?}", other),
        }
        let mut b = t.to_bytes();
        b[4] = 2;
        match Tensor::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected Format error, got {:?}", other),
        }
    }

    #[test]
    fn rejects_zero_dim() {
        let t = Tensor::from_f32(vec![2, 2], vec![0.0; 4]).unwrap();
        let mut b = t.to_bytes();
        // zero out the second dim
        b[11..15].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::from_f64(vec![2, 3], vec![1.5, -2.0, 0.0, 4.25, 1e-300, f64::MAX]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    proptest! {
        // Bytes -> Tensor -> bytes and Tensor -> bytes -> Tensor are both exact.
        #[test]
        fn round_trip_f32(dims in proptest::collection::vec(1usize..6, 1..4),
                          seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let values: Vec<f32> = (0..n).map(|i| (seed.wrapping_add(i as u32) as f32).sin()).collect();
            let t = Tensor::from_f32(dims, values).unwrap();
            let b = t.to_bytes();
            let back = Tensor::from_bytes(&b).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(back.to_bytes(), b);
        }

        #[test]
        fn round_trip_f64(dims in proptest::collection::vec(1usize..6, 1..4),
                          seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let values: Vec<f64> = (0..n).map(|i| (f64::from(seed) + i as f64).cos()).collect();
            let t = Tensor::from_f64(dims, values).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }

        // Arbitrary garbage must never panic; it errors or parses.
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = Tensor::from_bytes(&bytes);
        }
    }
}
