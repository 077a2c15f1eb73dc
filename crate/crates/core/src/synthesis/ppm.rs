//! Binary PPM (P6) and PGM (P5) with maxval 255, the crate's bit-exact image
//! formats.
//!
//! Loading maps byte `b` to `b/255`; saving maps `v` to `round(clamp(v)·255)`,
//! so save∘load on 8-bit-derived images is byte-identical. Parse errors carry
//! the byte offset at which they were detected.

use std::fs;
use std::path::Path;

use super::{Image, SynthesisError, SynthesisResult};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn header_err(&self, message: impl Into<String>) -> SynthesisError {
        SynthesisError::FormatHeader { offset: self.pos, message: message.into() }
    }

    /// Skip whitespace and `#` comments (comments run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> SynthesisResult<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.header_err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<usize>().map_err(|_| self.header_err(format!("{what} out of range")))
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> SynthesisResult<(usize, usize, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(cur.header_err(format!("missing {magic} magic")));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(cur.header_err(format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(cur.header_err("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.header_err("expected single whitespace before payload"));
    }
    Ok((width, height, cur.pos + 1))
}

/// Load a binary P6 PPM.
pub fn load_ppm(path: &Path) -> SynthesisResult<Image> {
    let bytes = fs::read(path)
        .map_err(|e| SynthesisError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let (width, height, payload) = parse_header(&bytes, "P6")?;
    let expected = width * height * 3;
    let got = bytes.len() - payload;
    if got < expected {
        return Err(SynthesisError::FormatTruncated { offset: bytes.len(), expected, got });
    }
    let mut img = Image::new(height, width);
    for (v, &b) in img.data.iter_mut().zip(bytes[payload..payload + expected].iter()) {
        *v = b as f64 / 255.0;
    }
    Ok(img)
}

/// Save a binary P6 PPM with maxval 255.
pub fn save_ppm(img: &Image, path: &Path) -> SynthesisResult<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len());
    for &v in &img.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)
        .map_err(|e| SynthesisError::Io { path: path.to_path_buf(), message: e.to_string() })
}

/// Load a binary P5 PGM as grayscale values in `[0, 1]`.
pub fn load_pgm(path: &Path) -> SynthesisResult<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)
        .map_err(|e| SynthesisError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let (width, height, payload) = parse_header(&bytes, "P5")?;
    let expected = width * height;
    let got = bytes.len() - payload;
    if got < expected {
        return Err(SynthesisError::FormatTruncated { offset: bytes.len(), expected, got });
    }
    let values = bytes[payload..payload + expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((values, height, width))
}

/// Save grayscale bytes as a binary P5 PGM.
pub fn save_pgm_bytes(
    values: &[u8],
    height: usize,
    width: usize,
    path: &Path,
) -> SynthesisResult<()> {
    debug_assert_eq!(values.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    fs::write(path, out)
        .map_err(|e| SynthesisError::Io { path: path.to_path_buf(), message: e.to_string() })
}
