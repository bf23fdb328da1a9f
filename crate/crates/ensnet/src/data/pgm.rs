//! Binary PGM ("P5") reading and writing.
//!
//! Only the 8-bit binary variant is accepted. Header comments introduced by
//! `#` are tolerated anywhere whitespace is allowed, per the format. Parse
//! errors carry the byte offset where reading stopped.

use std::path::Path;

use super::{DataError, GrayImage};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn err(&self, reason: &str) -> DataError {
        DataError::UnsupportedFormat {
            offset: self.pos,
            reason: reason.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(&format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse()
            .map_err(|_| self.err(&format!("{what} out of range")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let mut cur = Cursor::new(bytes);
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(cur.err(&format!("not a binary PGM (magic {got:?}, expected \"P5\")")));
    }
    cur.pos = 2;
    let width = cur.read_number("width")?;
    let height = cur.read_number("height")?;
    let maxval = cur.read_number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(&format!("maxval {maxval} outside 8-bit range")));
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image extent"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected whitespace before raster")),
    }
    let need = width * height;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(&format!(
            "truncated raster: need {need} bytes, have {}",
            raster.len()
        )));
    }
    let pixels = raster[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub(crate) fn encode(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub(crate) fn load(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub(crate) fn save(path: &Path, image: &GrayImage) -> Result<(), DataError> {
    std::fs::write(path, encode(image)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_scaling() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = decode(bytes).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 2);
        let expected = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, e) in img.pixels.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((img.pixels[2] - 0.50196).abs() < 1e-5);
        assert!((img.pixels[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn ascii_pgm_rejected() {
        let bytes = b"P2\n2 2\n255\n0 255 128 64\n";
        let err = decode(bytes).unwrap_err();
        assert!(err.to_string().contains("P5"), "{err}");
    }

    #[test]
    fn header_comments_tolerated() {
        let bytes = b"P5\n# a fixture with comments\n2 # inline\n2\n# before maxval\n255\n\x01\x02\x03\x04";
        let img = decode(bytes).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 2);
        assert!((img.pixels[0] - 1.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = b"P5\n4 4\n255\n\x00\x01";
        match decode(bytes) {
            Err(DataError::UnsupportedFormat { offset, reason }) => {
                assert_eq!(offset, bytes.len());
                assert!(reason.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1],
        };
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back.width, 3);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
