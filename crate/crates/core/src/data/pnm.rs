//! Binary PPM (P6) and PGM (P5) files with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(|e| Error::io(path, e))
}

/// Parses a P5 or P6 file; returns (width, height, channels, samples).
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Data(format!("unsupported PNM magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PNM header field {s:?}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("PNM maxval {maxval} unsupported (need 255)")));
    }
    let n = width * height * channels;
    let samples = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Data(format!("PNM body shorter than {n} bytes")))?;
    Ok((width, height, channels, samples.to_vec()))
}

pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_canonical() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn decodes_with_comments() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_pnm(&bytes).unwrap(), (1, 1, 3, vec![1, 2, 3]));
    }

    #[test]
    fn round_trips_binary_samples() {
        let rgb: Vec<u8> = (0..27).map(|i| (i * 9) as u8).collect();
        assert_eq!(decode_pnm(&encode_ppm(3, 3, &rgb)).unwrap(), (3, 3, 3, rgb));
    }

    #[test]
    fn truncated_body_is_an_error() {
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
