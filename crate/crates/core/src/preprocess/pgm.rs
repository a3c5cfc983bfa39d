//! Binary greyscale PGM (`P5`), 8- or 16-bit, mapped linearly to `[0, 1]`.

use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data("malformed PGM header"))
}

pub fn decode_pgm(bytes: &[u8], source_id: &str) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::data(format!("{source_id}: not a binary PGM (P5)")));
    }
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if !(1..=65535).contains(&maxval) || w == 0 || h == 0 {
        return Err(Error::data(format!("{source_id}: unsupported PGM geometry {w}x{h} maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data(format!("{source_id}: truncated PGM header")));
    }
    pos += 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let body = &bytes[pos..];
    if body.len() < w * h * bpp {
        return Err(Error::data(format!("{source_id}: PGM body has {} bytes, need {}", body.len(), w * h * bpp)));
    }
    let scale = maxval as f64;
    Image::from_fn(h, w, source_id, |y, x| {
        let i = y * w + x;
        let v = if bpp == 1 { body[i] as f64 } else { u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64 };
        (v / scale).min(1.0)
    })
}

pub fn encode_pgm(img: &Image, maxval: u16) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::config(format!("PGM maxval must be 255 or 65535, got {maxval}")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    for &v in img.pixels().data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u16;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_pgm(&bytes, &id)
}

pub fn write_pgm(img: &Image, path: &Path, maxval: u16) -> Result<()> {
    std::fs::write(path, encode_pgm(img, maxval)?)?;
    Ok(())
}
