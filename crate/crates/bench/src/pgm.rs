//! Binary 8-bit PGM (P5) images mapped linearly to `[0, 1]`.

use std::io::{Read, Write};
use std::path::Path;

use nrmatch_core::Image;

use crate::error::{BenchError, Result};

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
        return Err(BenchError::Image("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != "P5" {
        return Err(BenchError::Image("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        token(bytes, &mut pos)?.parse().map_err(|_| BenchError::Image(format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(BenchError::Image(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| BenchError::Image("truncated raster".into()))?;
    let data = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(Image::new(w, h, data)?)
}

/// Quantizes to the nearest 8-bit level.
pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| BenchError::Image(format!("{}: {e}", path.as_ref().display())))
}

pub fn write(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode(image))?;
    Ok(())
}
