//! `.hpdc` container: header followed by the ẑ, ŷ and residual substreams.
//!
//! Layout, little-endian:
//!
//! | field | bytes |
//! |---|---|
//! | magic `HPDC` | 4 |
//! | version | 2 |
//! | width, height | 4 + 4 |
//! | bit depth B | 1 |
//! | divisor d | 4 |
//! | precision (µm per unit) | 4 |
//! | checkpoint hash | 32 |
//! | residual bounds, 2 × (i32 min, i32 max) | 16 |
//! | padded width, padded height | 4 + 4 |
//! | 3 × (u32 length, bytes): ẑ, ŷ, r | ... |
//! | check digest of the decoded map | 8 |

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPDC";
pub const VERSION: u16 = 1;
pub const HASH_LEN: usize = 32;
pub const DIGEST_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
    pub bit_depth: u8,
    pub divisor: u32,
    pub precision: u32,
    pub checkpoint_hash: [u8; HASH_LEN],
    pub residual_bounds: [(i32, i32); 2],
    pub padded_width: u32,
    pub padded_height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecStream {
    pub header: StreamHeader,
    pub z: Vec<u8>,
    pub y: Vec<u8>,
    pub r: Vec<u8>,
    pub digest: [u8; DIGEST_LEN],
}

impl CodecStream {
    pub fn header_len() -> usize {
        4 + 2 + 8 + 1 + 4 + 4 + HASH_LEN + 16 + 8
    }

    /// Total serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        Self::header_len() + 12 + self.z.len() + self.y.len() + self.r.len() + DIGEST_LEN
    }

    pub fn write(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.bit_depth);
        out.extend_from_slice(&h.divisor.to_le_bytes());
        out.extend_from_slice(&h.precision.to_le_bytes());
        out.extend_from_slice(&h.checkpoint_hash);
        for (lo, hi) in h.residual_bounds {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        out.extend_from_slice(&h.padded_width.to_le_bytes());
        out.extend_from_slice(&h.padded_height.to_le_bytes());
        for sub in [&self.z, &self.y, &self.r] {
            out.extend_from_slice(&(sub.len() as u32).to_le_bytes());
            out.extend_from_slice(sub);
        }
        out.extend_from_slice(&self.digest);
        out
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not an HPDC stream (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported stream version {version}")));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let bit_depth = r.take(1)?[0];
        let divisor = r.u32()?;
        let precision = r.u32()?;
        let mut checkpoint_hash = [0u8; HASH_LEN];
        checkpoint_hash.copy_from_slice(r.take(HASH_LEN)?);
        let mut residual_bounds = [(0, 0); 2];
        for b in &mut residual_bounds {
            *b = (r.i32()?, r.i32()?);
            if b.0 > b.1 {
                return Err(Error::format(format!("residual bounds {} > {}", b.0, b.1)));
            }
        }
        let padded_width = r.u32()?;
        let padded_height = r.u32()?;
        if width == 0 || height == 0 || padded_width < width || padded_height < height {
            return Err(Error::format(format!(
                "dimensions {width}x{height} padded to {padded_width}x{padded_height}"
            )));
        }
        let mut subs = Vec::with_capacity(3);
        for _ in 0..3 {
            let len = r.u32()? as usize;
            subs.push(r.take(len)?.to_vec());
        }
        let mut digest = [0u8; DIGEST_LEN];
        digest.copy_from_slice(r.take(DIGEST_LEN)?);
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after stream",
                bytes.len() - r.pos
            )));
        }
        let r_sub = subs.pop().unwrap();
        let y = subs.pop().unwrap();
        let z = subs.pop().unwrap();
        Ok(CodecStream {
            header: StreamHeader {
                width,
                height,
                bit_depth,
                divisor,
                precision,
                checkpoint_hash,
                residual_bounds,
                padded_width,
                padded_height,
            },
            z,
            y,
            r: r_sub,
            digest,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("stream truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CodecStream {
        CodecStream {
            header: StreamHeader {
                width: 33,
                height: 17,
                bit_depth: 16,
                divisor: 512,
                precision: 1000,
                checkpoint_hash: [7; HASH_LEN],
                residual_bounds: [(-3, 4), (-200, 17)],
                padded_width: 64,
                padded_height: 64,
            },
            z: vec![1, 2, 3],
            y: vec![],
            r: vec![9; 40],
            digest: [5; DIGEST_LEN],
        }
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let bytes = s.write();
        assert_eq!(bytes.len(), s.byte_len());
        assert_eq!(CodecStream::read(&bytes).unwrap(), s);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = sample().write();
        bytes[0] = b'X';
        assert!(matches!(CodecStream::read(&bytes), Err(Error::Format(_))));
        let mut bytes = sample().write();
        bytes[4] = 9;
        assert!(matches!(CodecStream::read(&bytes), Err(Error::Format(_))));
        let bytes = sample().write();
        for cut in [0, 10, bytes.len() - 1] {
            assert!(CodecStream::read(&bytes[..cut]).is_err());
        }
    }
}
