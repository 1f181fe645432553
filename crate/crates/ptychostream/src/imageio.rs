//! Binary PGM output for reconstructed images.
//!
//! Images are written as 16-bit P5 PGM (big-endian sample order, as the
//! format requires) after affine scaling of the source values onto
//! 0..=65535. The original value range is preserved in a `.range` sidecar
//! next to the image so readers can undo the scaling.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::field::RealImage;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a 16-bit P5 PGM: {0}")]
    BadHeader(String),
    #[error("pixel data truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("bad range sidecar {path}: {reason}")]
    BadRange { path: PathBuf, reason: String },
}

fn range_path(pgm_path: &Path) -> PathBuf {
    let mut os = pgm_path.as_os_str().to_owned();
    os.push(".range");
    PathBuf::from(os)
}

/// Writes `img` as 16-bit P5 PGM plus a `<path>.range` sidecar holding
/// `min max` of the source values. A constant image maps to all zeros
/// with min == max recorded in the sidecar.
pub fn write_pgm16(path: &Path, img: &RealImage) -> Result<(), PgmError> {
    let (min, max) = img.min_max();
    let span = max - min;
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{} {}\n65535\n", img.width(), img.height())?;
    let mut buf = Vec::with_capacity(img.data().len() * 2);
    for &v in img.data() {
        let q = if span > 0.0 {
            (((v - min) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    fs::write(range_path(path), format!("{min} {max}\n"))?;
    Ok(())
}

/// Reads a 16-bit P5 PGM written by [`write_pgm16`], restoring original
/// values from the `.range` sidecar. Without a sidecar the raw quantized
/// values (0..=65535) are returned as floats.
pub fn read_pgm16(path: &Path) -> Result<RealImage, PgmError> {
    let bytes = fs::read(path)?;
    let (width, height, maxval, data_start) = parse_pgm_header(&bytes)?;
    if maxval != 65535 {
        return Err(PgmError::BadHeader(format!("maxval {maxval}, expected 65535")));
    }
    let expected = width * height * 2;
    let pixels = &bytes[data_start..];
    if pixels.len() < expected {
        return Err(PgmError::Truncated { expected, got: pixels.len() });
    }
    let mut raw = Vec::with_capacity(width * height);
    for i in 0..width * height {
        raw.push(u16::from_be_bytes([pixels[2 * i], pixels[2 * i + 1]]) as f64);
    }
    let rp = range_path(path);
    if rp.exists() {
        let text = fs::read_to_string(&rp)?;
        let mut it = text.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64, PgmError> {
            s.and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| PgmError::BadRange {
                path: rp.clone(),
                reason: "expected two floats".into(),
            })
        };
        let min = parse(it.next())?;
        let max = parse(it.next())?;
        let span = max - min;
        for v in &mut raw {
            *v = if span > 0.0 { min + (*v / 65535.0) * span } else { min };
        }
    }
    Ok(RealImage::from_data(height, width, raw))
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, u32, usize), PgmError> {
    // header = "P5", whitespace-separated width, height, maxval, then a
    // single whitespace byte before binary data; '#' comments allowed
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::BadHeader("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(PgmError::BadHeader("missing numeric field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::BadHeader("unparseable field".into()))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::BadHeader("missing separator before data".into()));
    }
    pos += 1;
    Ok((fields[0] as usize, fields[1] as usize, fields[2], pos))
}
