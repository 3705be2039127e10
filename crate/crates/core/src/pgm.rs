//! 8-bit binary PGM (P5) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// A decoded 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<GrayImage> {
        let mut cursor = 0usize;
        let mut fields = [0usize; 3];
        if bytes.get(..2) != Some(b"P5".as_slice()) {
            return Err(Error::format(path, "missing P5 magic"));
        }
        cursor += 2;
        for field in fields.iter_mut() {
            // whitespace and '#' comments may separate header fields
            loop {
                match bytes.get(cursor) {
                    Some(b) if b.is_ascii_whitespace() => cursor += 1,
                    Some(b'#') => {
                        while bytes.get(cursor).is_some_and(|&b| b != b'\n') {
                            cursor += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = cursor;
            while bytes.get(cursor).is_some_and(u8::is_ascii_digit) {
                cursor += 1;
            }
            *field = std::str::from_utf8(&bytes[start..cursor])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, "malformed header"))?;
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(
                path,
                format!("maxval {maxval} is not an 8-bit value"),
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(cursor).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::format(path, "malformed header"));
        }
        cursor += 1;
        let pixels = &bytes[cursor..];
        if pixels.len() != width * height {
            return Err(Error::format(
                path,
                format!(
                    "expected {} pixels for {width}x{height}, found {}",
                    width * height,
                    pixels.len()
                ),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<GrayImage> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
