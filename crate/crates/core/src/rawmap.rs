//! Raw little-endian `f32` maps.
//!
//! Layout: the 8-byte magic `NNIDCST1`, width and height as `u32` LE, then
//! `width * height` row-major `f32` LE values. Cost maps, feature maps and
//! convolution kernels all use this layout.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NNIDCST1";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RawMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl RawMap {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("missing NNIDCST1 header".into()));
        }
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != width * height * 4 {
            return Err(bad(format!(
                "{width}x{height} map needs {} payload bytes, found {}",
                width * height * 4,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.encode())?;
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let m = RawMap {
            width: 2,
            height: 1,
            values: vec![1.0, -2.5],
        };
        let bytes = m.encode();
        assert_eq!(&bytes[..8], b"NNIDCST1");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(RawMap::decode(&bytes, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = RawMap {
            width: 3,
            height: 3,
            values: vec![0.0; 9],
        }
        .encode();
        bytes.pop();
        assert!(RawMap::decode(&bytes, Path::new("m")).is_err());
        assert!(RawMap::decode(b"NOTAMAP!12345678", Path::new("m")).is_err());
    }
}
