//! Raw field files: `"HSF1"`, `u32` rank, `u32` axis lengths, then `f64`
//! row-major payload, all little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSF1";

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 8 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &len in tensor.shape() {
        out.extend_from_slice(&(len as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("truncated HSF file".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    if take(&mut bytes, 4)? != MAGIC {
        return Err(Error::Format("bad HSF magic".into()));
    }
    let rank = read_u32(&mut bytes)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut bytes).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let payload = take(&mut bytes, count * 8)?;
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in HSF file", bytes.len())));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(tensor))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"HSF1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[2, 2]);
        let mut bytes = encode(&t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut state = seed;
            let t = Tensor::from_fn(&shape, |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(state >> 2)
            });
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
