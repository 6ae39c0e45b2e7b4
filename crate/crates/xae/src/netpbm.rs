//! Minimal binary netpbm support: 8-bit PGM (P5) and PPM (P6) reading,
//! PGM writing. This is the only image codec in the crate; probability
//! maps and feature grids are exported as PGM, and the patch importer
//! accepts PGM/PPM inputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, XaeError};

/// Raw 8-bit netpbm raster: interleaved pixels, `channels` ∈ {1, 3}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Interleaved row-major samples, `width·height·channels` bytes.
    pub pixels: Vec<u8>,
}

/// Read a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path).map_err(|e| XaeError::io(path, e))?;
    let malformed = |reason: &str| XaeError::MalformedFile {
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < 2 {
        return Err(malformed("file too short for a netpbm header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(malformed("unsupported magic, expected P5 or P6")),
    };
    // Header tokens (width, height, maxval) separated by whitespace,
    // with '#' comments running to end of line.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
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
            return Err(malformed("missing numeric header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| malformed("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing raster separator"));
    }
    pos += 1;
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(malformed("truncated raster"));
    }
    if raster.len() > expected {
        return Err(malformed("trailing bytes after raster"));
    }
    Ok(PnmImage {
        channels,
        width,
        height,
        pixels: raster.to_vec(),
    })
}

/// Write a binary PGM (P5) file with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(XaeError::DimMismatch {
            expected: width * height,
            got: pixels.len(),
        });
    }
    let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| XaeError::io(path, e);
    write!(w, "P5\n{width} {height}\n255\n").map_err(io_err)?;
    w.write_all(pixels).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Quantize a probability map to PGM intensities: round(255·p), with p
/// clamped into [0,1] first.
pub fn probabilities_to_bytes(map: &Array2<f64>) -> Vec<u8> {
    map.iter()
        .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
        .collect()
}
