//! Classification-map rendering to binary PPM (P6, 8-bit RGB), one pixel
//! per prediction. Class 0 renders black by convention; palettes are exact,
//! so a rendered map parses back to the original class grid.

use crate::data::raster::LabelRaster;
use crate::error::{Error, Result};
use std::path::Path;

/// Deterministic palette for `classes` classes plus black for id 0. Colors
/// are hue-spaced with alternating saturation/value so neighbors stay
/// distinguishable, and are distinct by construction.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    let mut palette = vec![[0u8, 0, 0]];
    for c in 0..classes {
        let hue = 360.0 * c as f64 / classes as f64;
        let (s, v) = match c % 3 {
            0 => (0.9, 0.95),
            1 => (0.65, 0.8),
            _ => (0.9, 0.6),
        };
        palette.push(hsv_to_rgb(hue, s, v));
    }
    palette
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, x, 0.0),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Render a class-id grid to PPM bytes. Every id must index into `palette`.
pub fn render_map(predictions: &LabelRaster, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", predictions.width, predictions.height).into_bytes();
    out.reserve(predictions.values.len() * 3);
    for &id in &predictions.values {
        if id < 0 || id as usize >= palette.len() {
            return Err(Error::PaletteRange {
                id: id as i64,
                palette_len: palette.len(),
            });
        }
        out.extend_from_slice(&palette[id as usize]);
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

/// Parse a P6 PPM into (width, height, pixels).
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bad = |detail: &str| Error::Format {
        what: "PPM image".into(),
        detail: detail.into(),
    };
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
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
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if tokens[0] != "P6" {
        return Err(bad(&format!("expected P6 magic, got {}", tokens[0])));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    if tokens[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if bytes.len() - pos != need {
        return Err(bad(&format!(
            "payload is {} bytes, expected {}",
            bytes.len() - pos,
            need
        )));
    }
    let pixels = bytes[pos..]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((width, height, pixels))
}

/// Recover class ids from a rendered map by exact palette lookup.
pub fn classes_from_ppm(bytes: &[u8], palette: &[[u8; 3]]) -> Result<LabelRaster> {
    let (width, height, pixels) = parse_ppm(bytes)?;
    let mut values = Vec::with_capacity(pixels.len());
    for (i, px) in pixels.iter().enumerate() {
        let id = palette.iter().position(|p| p == px).ok_or_else(|| Error::Format {
            what: "PPM image".into(),
            detail: format!("pixel {i} color {:?} not in palette", px),
        })?;
        values.push(id as i16);
    }
    LabelRaster::new(height, width, values)
}
