//! CAMT tensor files: magic `CAMT`, rank as u32 LE, each dim as u32 LE, then
//! the payload as f32 LE in row-major order.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CAMT";

/// Dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::Tensor("dim overflow".into()))?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Tensor("bad magic".into()));
        }
        let mut words = bytes[4..].chunks_exact(4).map(|c| {
            u32::from_le_bytes(c.try_into().expect("chunk of four bytes"))
        });
        let rank = words
            .next()
            .ok_or_else(|| Error::Tensor("truncated header".into()))? as usize;
        let header_len = rank
            .checked_add(2)
            .and_then(|w| w.checked_mul(4))
            .ok_or_else(|| Error::Tensor("dim overflow".into()))?;
        if bytes.len() < header_len {
            return Err(Error::Tensor("truncated header".into()));
        }
        let dims: Vec<usize> = words.by_ref().take(rank).map(|d| d as usize).collect();
        let n = element_count(&dims).ok_or_else(|| Error::Tensor("dim overflow".into()))?;
        let payload = &bytes[header_len..];
        let need = n
            .checked_mul(4)
            .ok_or_else(|| Error::Tensor("dim overflow".into()))?;
        if payload.len() < need {
            return Err(Error::Tensor(format!(
                "truncated payload: {} of {n} floats",
                payload.len() / 4
            )));
        }
        if payload.len() > need {
            return Err(Error::Tensor(format!(
                "{} trailing bytes after payload",
                payload.len() - need
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of four bytes")))
            .collect();
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        if d > u32::MAX as usize {
            None
        } else {
            acc.checked_mul(d)
        }
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.camt");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Tensor::new(vec![1], vec![0.0]).unwrap().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = Tensor::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let t = Tensor::new(vec![3, 4], vec![0.5; 12]).unwrap();
        let mut bytes = t.to_bytes();
        // rewrite the header to claim 4x4
        bytes[8..12].copy_from_slice(&4u32.to_le_bytes());
        let err = Tensor::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn dim_overflow() {
        let mut bytes = b"CAMT".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = Tensor::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("overflow"), "{err}");
    }

    #[test]
    fn rank_zero_is_a_scalar() {
        let t = Tensor::new(vec![], vec![7.5]).unwrap();
        assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n as u64)
                .map(|i| {
                    let bits = (seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15)) as u32;
                    let v = f32::from_bits(bits);
                    if v.is_finite() { v } else { i as f32 }
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
