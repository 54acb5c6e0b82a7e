//! Binary 16-bit PGM (`P5`, maxval 65535), big-endian samples.

use std::io::Write;
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// Encodes `[0, 1]` intensities as `round(v · 65535)`.
pub fn encode_pgm(height: usize, width: usize, pixels: &[f64]) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width, "pixel count");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(pixels.len() * 2);
    for &v in pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_pgm(height, width, pixels)).map_err(io_err(path))
}

/// A decoded 16-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    /// Samples rescaled to `[0, 1]`.
    pub fn unit_pixels(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / self.maxval as f64).collect()
    }
}

pub fn decode_pgm(bytes: &[u8], source: &str) -> Result<Pgm> {
    let bad = |message: String| Error::Parse {
        path: source.into(),
        line: 0,
        message,
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens
    // with optional comments, then exactly one whitespace byte.
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
            return Err(bad("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad(format!("expected P5 magic, found {:?}", tokens[0])));
    }
    let num = |t: &str, what: &str| -> Result<usize> {
        t.parse().map_err(|_| bad(format!("invalid {what} {t:?}")))
    };
    let (width, height, maxval) = (num(&tokens[1], "width")?, num(&tokens[2], "height")?, num(&tokens[3], "maxval")?);
    if !(256..=65535).contains(&maxval) {
        return Err(bad(format!("expected a 16-bit maxval, found {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != width * height * 2 {
        return Err(bad(format!(
            "expected {} bytes of pixel data for {width}×{height}, found {}",
            width * height * 2,
            body.len()
        )));
    }
    let samples: Vec<u16> = body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(bad(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        height,
        width,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes, &path.display().to_string())
}
