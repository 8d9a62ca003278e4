//! `ASTIMG01` flat binary images and 8-bit PGM previews.
//!
//! Layout: the 8 magic bytes `ASTIMG01`, width and height as little-endian
//! `u32`, then `width * height` little-endian `f32` values in row-major order.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::image::ImageBuffer;

pub const MAGIC: &[u8; 8] = b"ASTIMG01";
pub const HEADER_LEN: usize = 16;

/// Encodes `img`. Values are stored as `f32`; those outside the `f32`
/// range are rejected rather than silently turned into infinities.
pub fn encode_image(img: &ImageBuffer) -> Result<Vec<u8>> {
    let (w, h) = img.shape();
    let (w32, h32) = match (u32::try_from(w), u32::try_from(h)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => {
            return Err(Error::domain(format!(
                "{w}x{h} does not fit the u32 header fields"
            )))
        }
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * img.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&w32.to_le_bytes());
    out.extend_from_slice(&h32.to_le_bytes());
    for (i, &v) in img.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::domain(format!("pixel {i} = {v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let payload = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(FormatError::DimensionOverflow { width, height })?;
    if width == 0 || height == 0 {
        return Err(FormatError::Malformed {
            line: 0,
            message: format!("zero-sized image {width}x{height}"),
        });
    }
    if bytes.len() < payload {
        return Err(FormatError::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(FormatError::TrailingBytes {
            found: bytes.len() - payload,
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ImageBuffer::new(width as usize, height as usize, data).map_err(|e| FormatError::Malformed {
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, encode_image(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_image(&bytes)?)
}

/// Binary PGM (`P5`) with `[lo, hi]` mapped linearly onto 0..=255.
pub fn encode_pgm(img: &ImageBuffer, lo: f64, hi: f64) -> Vec<u8> {
    let (w, h) = img.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(
        img.as_slice()
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, encode_pgm(img, 0.0, 1.0)).map_err(|e| Error::io(path, e))
}
