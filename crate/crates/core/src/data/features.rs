//! `PQVF` feature files: a 16-byte little-endian header followed by
//! `frames x dim` float32 values, row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"PQVF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    let (n, dim) = frames.require_matrix("write_features")?;
    let (n32, dim32) = (to_u32(n, "frame count")?, to_u32(dim, "dim")?);
    let mut out = Vec::with_capacity(HEADER_LEN + n * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected PQVF"));
    }
    let version = read_u32(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dim = read_u32(bytes, 8) as usize;
    let frames = read_u32(bytes, 12) as usize;
    let expected = frames
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, "payload size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "size mismatch: header declares {frames}x{dim} ({expected} bytes), payload has {}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::matrix(frames, dim, data)
}

/// Writes `frames: [T, dim]` as float32.
pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    let bytes = encode_features(frames)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit in u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_rows(&[vec![1.0, -2.5]]).unwrap();
        let b = encode_features(&t).unwrap();
        assert_eq!(&b[0..4], b"PQVF");
        assert_eq!(read_u32(&b, 4), 1);
        assert_eq!(read_u32(&b, 8), 2);
        assert_eq!(read_u32(&b, 12), 1);
        assert_eq!(b.len(), 16 + 8);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs() {
        let p = Path::new("x.pqvf");
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = encode_features(&t).unwrap();
        let err = decode_features(&b[..b.len() - 1], p).unwrap_err().to_string();
        assert!(err.contains("size mismatch"), "{err}");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, p).unwrap_err().to_string().contains("magic"));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(decode_features(&bad, p).is_err());
        assert!(decode_features(&b[..10], p).is_err());
    }

    #[test]
    fn empty_file_is_valid() {
        let t = Tensor::matrix(0, 5, vec![]).unwrap();
        let back = decode_features(&encode_features(&t).unwrap(), Path::new("e")).unwrap();
        assert_eq!(back.shape(), &[0, 5]);
    }
}
