//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("pnm: {}", msg.into()))
}

/// Next header token, skipping whitespace and `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| format_err("header is not ASCII"))
}

/// Decodes to `[3, H, W]` in `[0, 1]`; grayscale is replicated to three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)? {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format_err(format!("unsupported magic {other:?}"))),
    };
    let width: usize = token(bytes, &mut pos)?.parse().map_err(|_| format_err("bad width"))?;
    let height: usize = token(bytes, &mut pos)?.parse().map_err(|_| format_err("bad height"))?;
    let maxval: usize = token(bytes, &mut pos)?.parse().map_err(|_| format_err("bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(format!("maxval {maxval} is not supported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format_err("empty image"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing pixel data"));
    }
    pos += 1;
    let n = width * height;
    let data = &bytes[pos..];
    if data.len() < n * channels {
        return Err(format_err(format!("pixel data holds {} bytes, expected {}", data.len(), n * channels)));
    }
    let mut out = vec![0.0f32; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let src = if channels == 3 { data[p * 3 + c] } else { data[p] };
            out[c * n + p] = src as f32 / 255.0;
        }
    }
    Tensor::new(&[3, height, width], out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pnm(&std::fs::read(path)?)
}

/// P6 encoding of a `[3, H, W]` image in `[0, 1]`, rounded to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("ppm expects [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..n {
        for c in 0..3 {
            out.push((d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(image)?)?)
}

/// Rounds an image to the 8-bit grid a PPM roundtrip would produce.
pub fn quantize(image: &Tensor) -> Tensor {
    let mut q = image.clone();
    for v in q.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    q
}
