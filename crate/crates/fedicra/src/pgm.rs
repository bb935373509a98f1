//! Binary greymap (P5, maxval 255) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a P5 file with maxval 255; `#` comments in the header are allowed.
pub fn decode(buf: &[u8]) -> std::result::Result<Gray, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {:?}", s));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {} unsupported", maxval));
    }
    pos += 1; // single whitespace byte after maxval
    let pixels = buf.get(pos..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(format!("expected {} pixels, found {}", width * height, pixels.len()));
    }
    Ok(Gray {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}

pub fn write(path: &Path, img: &Gray) -> Result<()> {
    fs::write(path, encode(img)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<Gray> {
    let buf = fs::read(path).map_err(Error::io(path))?;
    decode(&buf).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let img = Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        assert_eq!(decode(&encode(&img)).unwrap(), img);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(decode(&commented).unwrap(), img);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode(b"P2\n1 1\n255\n\0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\0\0").is_err());
    }
}
