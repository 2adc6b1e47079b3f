//! Grayscale PFM disparity maps. Rows are stored bottom to top; a negative
//! scale marks little-endian data. Non-finite values mark invalid pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::DisparityMap;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("pfm: {}", msg.into()))
}

/// Little-endian encoding; invalid pixels are written as `+inf`.
pub fn encode_pfm(map: &DisparityMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(4 * map.width * map.height);
    for row in (0..map.height).rev() {
        for col in 0..map.width {
            let i = row * map.width + col;
            let v = if map.valid[i] { map.values[i] } else { f32::INFINITY };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits the next whitespace-delimited token off `bytes[*pos..]`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| format_err("header is not ASCII"))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DisparityMap> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(format_err("colour PFM is not a disparity map")),
        other => return Err(format_err(format!("bad magic {other:?}"))),
    }
    let width: usize = token(bytes, &mut pos)?.parse().map_err(|_| format_err("bad width"))?;
    let height: usize = token(bytes, &mut pos)?.parse().map_err(|_| format_err("bad height"))?;
    let scale: f32 = token(bytes, &mut pos)?.parse().map_err(|_| format_err("bad scale"))?;
    if width == 0 || height == 0 {
        return Err(format_err("empty image"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err("scale must be non-zero"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing payload"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let n = width * height;
    if payload.len() < 4 * n {
        return Err(format_err(format!("payload holds {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0f32; n];
    for (k, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (height - 1 - k / width, k % width);
        values[row * width + col] = v;
    }
    let valid = values.iter().map(|v| v.is_finite()).collect();
    DisparityMap::new(width, height, values, valid)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &DisparityMap) -> Result<()> {
    Ok(std::fs::write(path, encode_pfm(map))?)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<DisparityMap> {
    decode_pfm(&std::fs::read(path)?)
}
