//! Compressed file container.
//!
//! ```text
//! offset size field
//!      0    4 magic "CAE1"
//!      4    1 format version (1)
//!      5    1 model id
//!      6    1 scale-set id
//!      7    2 interpolation weight, u16 LE, w = value / 65536
//!      9    4 width  (u32 LE, before padding)
//!     13    4 height (u32 LE, before padding)
//!     17    4 payload length (u32 LE)
//!     21    - range-coded payload
//! ```

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CAE1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub model_id: u8,
    pub scale_set: u8,
    pub interp_weight: u16,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedFile {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl CompressedFile {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `8 · total bytes / (width · height)`, header included.
    pub fn bpp(&self) -> f64 {
        8.0 * self.len() as f64 / (f64::from(self.header.width) * f64::from(self.header.height))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(h.model_id);
        out.push(h.scale_set);
        out.extend_from_slice(&h.interp_weight.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt {
                offset: bytes.len(),
                reason: format!("file shorter than the {HEADER_LEN}-byte header"),
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a compressed image".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported format version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let header = Header {
            model_id: bytes[5],
            scale_set: bytes[6],
            interp_weight: u16::from_le_bytes([bytes[7], bytes[8]]),
            width: u32_at(9),
            height: u32_at(13),
        };
        if header.width == 0 || header.height == 0 {
            return Err(Error::Format("zero image dimension in header".into()));
        }
        let len = u32_at(17) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < len {
            return Err(Error::Corrupt {
                offset: bytes.len(),
                reason: format!("payload truncated: header says {len} bytes, found {}", payload.len()),
            });
        }
        if payload.len() > len {
            return Err(Error::Corrupt {
                offset: HEADER_LEN + len,
                reason: "trailing bytes after payload".into(),
            });
        }
        Ok(Self {
            header,
            payload: payload.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CompressedFile {
        CompressedFile {
            header: Header {
                model_id: 2,
                scale_set: 1,
                interp_weight: 0x8000,
                width: 30,
                height: 50,
            },
            payload: vec![0, 9, 8, 7, 6, 5],
        }
    }

    #[test]
    fn header_is_21_bytes() {
        let f = sample();
        let b = f.to_bytes();
        assert_eq!(b.len(), 21 + 6);
        assert_eq!(&b[..4], b"CAE1");
        assert_eq!(CompressedFile::parse(&b).unwrap(), f);
        assert!((f.bpp() - 8.0 * 27.0 / 1500.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(CompressedFile::parse(&bad), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(CompressedFile::parse(&bad), Err(Error::Format(_))));
        assert!(matches!(
            CompressedFile::parse(&b[..b.len() - 1]),
            Err(Error::Corrupt { .. })
        ));
        assert!(CompressedFile::parse(&b[..10]).is_err());
    }
}
