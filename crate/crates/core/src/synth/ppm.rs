//! Binary PPM (P6) images, 8 bits per channel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Image;

pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.size, image.size).into_bytes();
    out.extend(
        image
            .data
            .iter()
            .map(|v| (((*v as f64).clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Dataset(format!("malformed PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if w != h || max != 255 {
        return Err(bad("expected a square 8-bit image"));
    }
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Image::new(w, body.iter().map(|b| (*b as f32 / 127.5) - 1.0).collect())
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    Ok(fs::write(path, encode(image))?)
}

pub fn read(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// Tiles equally sized images into rows of `cols`.
pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
    let size = images
        .first()
        .map(|i| i.size)
        .ok_or_else(|| Error::Contract("empty grid".into()))?;
    let rows = images.len().div_ceil(cols);
    let side = size * cols.max(rows);
    let mut data = vec![1.0f32; side * side * 3];
    for (k, img) in images.iter().enumerate() {
        if img.size != size {
            return Err(Error::dim("ppm::grid", &[size], &[img.size]));
        }
        let (r0, c0) = ((k / cols) * size, (k % cols) * size);
        for r in 0..size {
            let dst = ((r0 + r) * side + c0) * 3;
            data[dst..dst + size * 3].copy_from_slice(&img.data[r * size * 3..(r + 1) * size * 3]);
        }
    }
    Image::new(side, data)
}
