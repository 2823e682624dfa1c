//! DMAP map files and PGM previews.
//!
//! DMAP layout (little-endian): `"DMAP"`, u32 version = 1, u32 C, u32 H,
//! u32 W, then C·H·W f32 values, channel-major and row-major per channel.

use std::fs;
use std::path::Path;

use crate::diff::TensorMap;
use crate::error::{DuqError, Result};

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const DMAP_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_dmap(map: &TensorMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.len());
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&DMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DuqError::Format {
            offset,
            message: "truncated header".into(),
        })
}

pub fn decode_dmap(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 4 || &bytes[..4] != DMAP_MAGIC {
        return Err(DuqError::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
            ),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != DMAP_VERSION {
        return Err(DuqError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let c = read_u32(bytes, 8)? as usize;
    let h = read_u32(bytes, 12)? as usize;
    let w = read_u32(bytes, 16)? as usize;
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or(DuqError::Format {
            offset: 8,
            message: "dimensions overflow".into(),
        })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 4 * count {
        return Err(DuqError::Format {
            offset: HEADER_LEN + payload.len() / 4 * 4,
            message: format!(
                "truncated payload: header {c}x{h}x{w} needs {count} floats, found {}",
                payload.len() / 4
            ),
        });
    }
    if payload.len() > 4 * count {
        return Err(DuqError::Format {
            offset: HEADER_LEN + 4 * count,
            message: "trailing bytes after payload".into(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(DuqError::Format {
                offset: HEADER_LEN + 4 * i,
                message: "non-finite value".into(),
            });
        }
        data.push(v as f64);
    }
    TensorMap::new(c, h, w, data)
}

pub fn write_dmap(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dmap(map)).map_err(|e| DuqError::io(path, e))
}

pub fn read_dmap(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DuqError::io(path, e))?;
    decode_dmap(&bytes)
}

/// Binary PGM (P5, maxval 255) of the first channel, `round(255·clamp(v,0,1))`.
pub fn encode_pgm(map: &TensorMap) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.values()[..h * w]
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    out
}

pub fn write_pgm(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| DuqError::io(path, e))
}
