//! Tensor serialization: little-endian binary, magic "SMNT", u32 rank,
//! u32 extents, then an f32 or f64 payload (told apart by length).

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMNT";
const MAX_RANK: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + t.len() * 8);
    out.extend_from_slice(MAGIC);
    let mut buf4 = [0u8; 4];
    LittleEndian::write_u32(&mut buf4, t.shape().len() as u32);
    out.extend_from_slice(&buf4);
    for &e in t.shape() {
        LittleEndian::write_u32(&mut buf4, e as u32);
        out.extend_from_slice(&buf4);
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.values() {
                LittleEndian::write_f32(&mut buf4, v as f32);
                out.extend_from_slice(&buf4);
            }
        }
        Dtype::F64 => {
            let mut buf8 = [0u8; 8];
            for &v in t.values() {
                LittleEndian::write_f64(&mut buf8, v);
                out.extend_from_slice(&buf8);
            }
        }
    }
    out
}

/// Decode a buffer holding exactly one tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(TensorError::Encoding("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(TensorError::Encoding("bad magic, expected SMNT".into()));
    }
    let rank = LittleEndian::read_u32(&bytes[4..8]);
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorError::Encoding(format!("unreasonable rank {rank}")));
    }
    let header = 8 + 4 * rank as usize;
    if bytes.len() < header {
        return Err(TensorError::Encoding("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for i in 0..rank as usize {
        let e = LittleEndian::read_u32(&bytes[8 + 4 * i..12 + 4 * i]) as usize;
        if e == 0 {
            return Err(TensorError::Encoding("zero extent".into()));
        }
        count = count
            .checked_mul(e)
            .ok_or_else(|| TensorError::Encoding("extent overflow".into()))?;
        shape.push(e);
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = if payload.len() == count * 8 {
        payload.chunks_exact(8).map(LittleEndian::read_f64).collect()
    } else if payload.len() == count * 4 {
        payload
            .chunks_exact(4)
            .map(|c| LittleEndian::read_f32(c) as f64)
            .collect()
    } else {
        return Err(TensorError::Encoding(format!(
            "payload of {} bytes does not hold {count} f32 or f64 values",
            payload.len()
        )));
    };
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor_file(path: &std::path::Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode_tensor(t, dtype))?;
    Ok(())
}

pub fn read_tensor_file(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F64);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f32_payload_is_recognized() {
        let t = Tensor::from_vec(&[4], vec![0.5, 0.25, -1.0, 2.0]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F32);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_inputs_are_errors_not_panics() {
        assert!(decode_tensor(b"SMNT").is_err());
        assert!(decode_tensor(b"XXXX\x01\x00\x00\x00").is_err());
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = encode_tensor(&t, Dtype::F64);
        bytes.truncate(bytes.len() - 3);
        assert!(decode_tensor(&bytes).is_err());
    }
}
