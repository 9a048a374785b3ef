//! AVID clip files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVID"
//! 4       2     C  (u16 LE)
//! 6       2     T
//! 8       2     H
//! 10      2     W
//! 12      4     reserved, zero
//! 16      4·CTHW  f32 LE samples in (C, T, H, W) row-major order
//! ```

use std::path::Path;

use super::{dim_u16, Reader};
use crate::error::{Error, Result};
use crate::tokenizer::VideoTensor;

pub const MAGIC: &[u8; 4] = b"AVID";
pub const HEADER_LEN: usize = 16;

/// Samples are stored as f32; values not representable in f32 are rounded.
pub fn encode_avid(v: &VideoTensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.data().len());
    out.extend_from_slice(MAGIC);
    for d in v.shape() {
        out.extend_from_slice(&dim_u16(d, "video extent")?.to_le_bytes());
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_avid(bytes: &[u8]) -> Result<VideoTensor> {
    let mut r = Reader::new(bytes, "AVID");
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Format("AVID: bad magic".into()));
    }
    let shape = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    r.u32()?;
    let n: usize = shape.iter().product();
    let raw = r.take(4 * n)?;
    r.finish()?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    VideoTensor::new(shape, data)
}

pub fn write_avid(path: &Path, v: &VideoTensor) -> Result<()> {
    Ok(std::fs::write(path, encode_avid(v)?)?)
}

pub fn read_avid(path: &Path) -> Result<VideoTensor> {
    decode_avid(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_round_trip() {
        let v = VideoTensor::new([1, 2, 1, 2], vec![0.5, -1.0, 2.25, 3.0]).unwrap();
        let b = encode_avid(&v).unwrap();
        assert_eq!(&b[..4], b"AVID");
        assert_eq!(&b[4..12], &[1, 0, 2, 0, 1, 0, 2, 0]);
        assert_eq!(b.len(), 16 + 16);
        assert_eq!(&b[16..20], &0.5f32.to_le_bytes());
        assert_eq!(decode_avid(&b).unwrap(), v);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let v = VideoTensor::zeros([1, 1, 1, 2]);
        let mut b = encode_avid(&v).unwrap();
        assert!(decode_avid(&b[..b.len() - 1]).is_err());
        b.push(0);
        assert!(decode_avid(&b).is_err());
        b.pop();
        b[0] = b'X';
        assert!(decode_avid(&b).is_err());
    }
}
