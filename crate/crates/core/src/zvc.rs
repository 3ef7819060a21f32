//! Zero-value compression: a 1-bit-per-element nonzero bitmask followed by
//! the nonzero values in order.
//!
//! An element counts as nonzero when its bit pattern is not `+0.0`, so
//! negative zeros survive the round trip.

use std::fs;
use std::path::Path;

use crate::error::{DsgError, Result};
use crate::select::pack_bits;
use crate::tensor::Tensor;

pub const ZVC_MAGIC: &[u8; 4] = b"DSGZ";

#[derive(Debug, Clone, PartialEq)]
pub struct ZvcBlock {
    shape: Vec<usize>,
    element_count: usize,
    /// LSB-first packed bits, 1 = nonzero.
    bitmask: Vec<u8>,
    payload: Vec<f32>,
}

fn is_nonzero(v: f32) -> bool {
    v.to_bits() != 0
}

/// Bytes of a compressed block holding `n` elements of which `nnz` are
/// nonzero.
pub fn compressed_size(n: usize, nnz: usize) -> usize {
    n.div_ceil(8) + 4 * nnz
}

pub fn zvc_encode(t: &Tensor) -> ZvcBlock {
    let data = t.data();
    let bitmask = pack_bits(data.iter().map(|&v| is_nonzero(v)), data.len());
    let payload = data.iter().copied().filter(|&v| is_nonzero(v)).collect();
    ZvcBlock {
        shape: t.shape().to_vec(),
        element_count: data.len(),
        bitmask,
        payload,
    }
}

pub fn zvc_decode(b: &ZvcBlock) -> Result<Tensor> {
    let pop: usize = b.bitmask.iter().map(|x| x.count_ones() as usize).sum();
    if b.bitmask.len() != b.element_count.div_ceil(8) {
        return Err(DsgError::Corrupt(format!(
            "bitmask has {} bytes for {} elements",
            b.bitmask.len(),
            b.element_count
        )));
    }
    if pop != b.payload.len() {
        return Err(DsgError::Corrupt(format!(
            "bitmask popcount {pop} but payload holds {} values",
            b.payload.len()
        )));
    }
    let mut out = vec![0f32; b.element_count];
    let mut next = b.payload.iter();
    for (i, o) in out.iter_mut().enumerate() {
        if b.bitmask[i / 8] >> (i % 8) & 1 == 1 {
            // popcount == payload length, so this cannot run dry
            *o = *next.next().ok_or_else(|| DsgError::Corrupt("payload exhausted".into()))?;
        }
    }
    Tensor::from_bits_unchecked(b.shape.clone(), out)
}

impl ZvcBlock {
    /// Assembles a block from raw parts without checking consistency;
    /// [`zvc_decode`] reports corruption.
    pub fn from_parts(element_count: usize, bitmask: Vec<u8>, payload: Vec<f32>) -> Self {
        Self {
            shape: vec![element_count],
            element_count,
            bitmask,
            payload,
        }
    }

    pub fn element_count(&self) -> usize {
        self.element_count
    }

    pub fn nnz(&self) -> usize {
        self.payload.len()
    }

    pub fn bitmask(&self) -> &[u8] {
        &self.bitmask
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    /// `ceil(n/8) + 4·nnz`.
    pub fn compressed_bytes(&self) -> usize {
        self.bitmask.len() + 4 * self.payload.len()
    }

    pub fn raw_bytes(&self) -> usize {
        4 * self.element_count
    }

    pub fn ratio(&self) -> f64 {
        self.raw_bytes() as f64 / self.compressed_bytes() as f64
    }

    /// File layout: magic `DSGZ`, u64 LE element count, packed bitmask,
    /// LE f32 payload. The tensor shape is not stored; decoding a read-back
    /// block yields a flat tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(12 + self.compressed_bytes());
        v.extend_from_slice(ZVC_MAGIC);
        v.extend_from_slice(&(self.element_count as u64).to_le_bytes());
        v.extend_from_slice(&self.bitmask);
        for p in &self.payload {
            v.extend_from_slice(&p.to_le_bytes());
        }
        v
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 12 || &b[..4] != ZVC_MAGIC {
            return Err(DsgError::Corrupt("missing DSGZ header".into()));
        }
        let n = u64::from_le_bytes(b[4..12].try_into().expect("8 bytes")) as usize;
        let mask_len = n.div_ceil(8);
        let rest = &b[12..];
        if rest.len() < mask_len || (rest.len() - mask_len) % 4 != 0 {
            return Err(DsgError::Corrupt(format!(
                "{} body bytes do not fit {n} elements",
                rest.len()
            )));
        }
        let bitmask = rest[..mask_len].to_vec();
        let payload = rest[mask_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self::from_parts(n, bitmask, payload))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_256() {
        let b = zvc_encode(&Tensor::zeros([256]));
        assert_eq!(b.compressed_bytes(), 32);
        assert_eq!(b.ratio(), 32.0);
    }

    #[test]
    fn dense_expands_slightly() {
        let b = zvc_encode(&Tensor::full([1024], 1.5));
        assert_eq!(b.compressed_bytes(), 128 + 4096);
        assert!((b.ratio() - 4096.0 / 4224.0).abs() < 1e-12);
    }

    #[test]
    fn ninety_percent_sparse_thousand() {
        let data: Vec<f32> = (0..1000).map(|i| if i % 10 == 0 { 1.0 } else { 0.0 }).collect();
        let b = zvc_encode(&Tensor::new([1000], data).unwrap());
        assert_eq!(b.compressed_bytes(), 525);
        assert!((b.ratio() - 7.619).abs() < 1e-3);
    }

    #[test]
    fn corrupt_block_rejected() {
        let b = ZvcBlock::from_parts(8, vec![0b0000_0011], vec![1.0]);
        assert!(matches!(zvc_decode(&b), Err(DsgError::Corrupt(_))));
        assert!(ZvcBlock::from_bytes(b"DSGZ").is_err());
        assert!(ZvcBlock::from_bytes(b"XXXX00000000").is_err());
    }

    #[test]
    fn file_round_trip() {
        let t = Tensor::new([2, 3], vec![0., 1., -0., 0., 2.5, 0.]).unwrap();
        let b = zvc_encode(&t);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.zvc");
        b.write(&p).unwrap();
        let back = zvc_decode(&ZvcBlock::read(&p).unwrap()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    proptest! {
        #[test]
        fn round_trip_bitwise(
            vals in proptest::collection::vec(
                prop_oneof![
                    4 => Just(0.0f32),
                    1 => Just(-0.0f32),
                    1 => Just(f32::from_bits(1)),
                    4 => -1e6f32..1e6,
                ],
                1..300,
            )
        ) {
            let n = vals.len();
            let t = Tensor::from_bits_unchecked(vec![n], vals).unwrap();
            let b = zvc_encode(&t);
            let nnz = t.data().iter().filter(|v| v.to_bits() != 0).count();
            prop_assert_eq!(b.compressed_bytes(), compressed_size(n, nnz));
            let back = zvc_decode(&b).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
