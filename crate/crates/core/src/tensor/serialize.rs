//! Binary tensor format used by checkpoints.
//!
//! Layout: magic bytes `"LRCS"`, `u32` rank, one `u32` per extent, then the
//! values as little-endian IEEE-754 32-bit floats in row-major order.

use alloc::vec::Vec;

use super::shape_numel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LRCS";

/// Size in bytes of the encoding of a tensor with the given shape.
pub fn encoded_len(shape: &[usize]) -> Result<usize> {
    let numel = shape_numel(shape)?;
    Ok(4 + 4 + 4 * shape.len() + 4 * numel)
}

pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let numel = shape_numel(shape)?;
    if numel != data.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count does not match data length",
        });
    }
    let mut out = Vec::with_capacity(encoded_len(shape)?);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        let e32 = u32::try_from(e).map_err(|_| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extent exceeds u32",
        })?;
        out.extend_from_slice(&e32.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes one tensor record from the front of `bytes`, returning the shape,
/// the values, and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>, usize)> {
    let take = |off: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(off..off + n)
            .ok_or(Error::MalformedTensor("truncated record"))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::MalformedTensor("bad magic"));
    }
    let rank = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut off = 8;
    for _ in 0..rank {
        let e = u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize;
        shape.push(e);
        off += 4;
    }
    let numel = shape_numel(&shape).map_err(|_| Error::MalformedTensor("invalid shape"))?;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f32::from_le_bytes(take(off, 4)?.try_into().unwrap()));
        off += 4;
    }
    Ok((shape, data, off))
}
