//! Grayscale PGM (P5) export of [-1, 1] grids.

use std::path::Path;

use jointdiff::{Error, Result};

/// `round_half_up((v + 1) / 2 * 255)`, clamped to [0, 255].
pub fn to_byte(v: f32) -> u8 {
    let x = (v as f64 + 1.0) * 0.5 * 255.0;
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

pub fn encode_pgm(grid: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    if grid.len() != width * height {
        return Err(Error::ShapeMismatch {
            expected: vec![height, width],
            actual: vec![grid.len()],
        });
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image grid".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(grid.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn export_image(grid: &[f32], side: usize, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(grid, side, side)?)?;
    Ok(())
}

/// Reads back a binary PGM written by [`encode_pgm`]; returns (width, height, values).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = || Error::Format("not a binary 8-bit PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if fields[0] != "P5" || max != 255 || bytes.len() < pos + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..pos + w * h].iter().map(|&b| from_byte(b)).collect()))
}
