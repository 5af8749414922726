//! `PCM1` map blob: magic, little-endian `u64` point count, a color flag
//! byte, `count` `(f32 x, y, z)` triples, then `count` `(u8 r, g, b)` triples
//! when the flag is 1.

use std::path::Path;

use crate::error::{Error, Result};
use crate::projection::PointCloudMap;

pub const MAGIC: &[u8; 4] = b"PCM1";
const HEADER_LEN: usize = 4 + 8 + 1;

pub fn encode_map(map: &PointCloudMap) -> Vec<u8> {
    let n = map.len();
    let color_len = if map.colors().is_some() { 3 * n } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * n + color_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.push(map.colors().is_some() as u8);
    for p in map.points() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    if let Some(colors) = map.colors() {
        for c in colors {
            out.extend_from_slice(c);
        }
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<PointCloudMap> {
    let bad = |msg: String| Error::MapFormat(msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing PCM1 magic".into()));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let flag = bytes[12];
    if flag > 1 {
        return Err(bad(format!("color flag must be 0 or 1, got {flag}")));
    }
    let per_point: u64 = if flag == 1 { 15 } else { 12 };
    let expected = count
        .checked_mul(per_point)
        .and_then(|b| b.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| bad(format!("point count {count} overflows")))?;
    if expected != bytes.len() as u64 {
        return Err(bad(format!(
            "{count} points need {expected} bytes, blob has {}",
            bytes.len()
        )));
    }
    let n = count as usize;
    let body = &bytes[HEADER_LEN..];
    let points: Vec<[f32; 3]> = body[..12 * n]
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2)]
        })
        .collect();
    if flag == 1 {
        let colors = body[12 * n..]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        PointCloudMap::with_colors(points, colors)
    } else {
        PointCloudMap::new(points)
    }
}

pub fn read_map(path: &Path) -> Result<PointCloudMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes).map_err(|e| match e {
        Error::MapFormat(m) => Error::MapFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_map(path: &Path, map: &PointCloudMap) -> Result<()> {
    std::fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}
