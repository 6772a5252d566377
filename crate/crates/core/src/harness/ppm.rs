//! Binary PPM (P6, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::ImageBuffer;

pub fn quantize<T: Real>(v: T) -> u8 {
    let c = v.max(T::zero()).min(T::one()).as_f64();
    (c * 255.0).round() as u8
}

pub fn encode_ppm<T: Real>(img: &ImageBuffer<T>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.len() * 3);
    for p in &img.pixels {
        out.extend(p.iter().map(|c| quantize(*c)));
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PPM header field {:?}", String::from_utf8_lossy(tok))))
}

pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<ImageBuffer<T>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * 3;
    let data = bytes.get(pos..pos + need).ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let s = T::one() / T::c(255.0);
    let pixels = data.chunks_exact(3).map(|c| [T::from_u8(c[0]).unwrap() * s, T::from_u8(c[1]).unwrap() * s, T::from_u8(c[2]).unwrap() * s]).collect();
    ImageBuffer::from_pixels(width, height, pixels)
}

pub fn write_image<T: Real>(path: &Path, img: &ImageBuffer<T>) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_image<T: Real>(path: &Path) -> Result<ImageBuffer<T>> {
    decode_ppm(&fs::read(path)?)
}
