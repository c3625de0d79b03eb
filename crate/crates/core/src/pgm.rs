//! Binary 8-bit PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read a P5 file into a `1x1xHxW` tensor of raw grey levels (0..=maxval).
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    parse_pgm(&fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
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
            return Err(Error::format("PGM header truncated"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("PGM header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(Error::format(format!("expected P5 PGM, got {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::format("PGM pixel data truncated"))?;
    Tensor::from_vec(&[1, 1, h, w], pixels.iter().map(|&b| b as f64).collect())
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape(format!("PGM needs a single grey image, got {:?}", img.shape())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Write a P5 file, rounding and clamping values to 0..=255.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_clamp() {
        let img = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0, 12.4, 255.0, 300.0, -4.0, 99.6]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        let back = parse_pgm(&bytes).unwrap();
        assert_eq!(back.data(), &[0.0, 12.0, 255.0, 255.0, 0.0, 100.0]);
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        assert_eq!(parse_pgm(bytes).unwrap().data(), &[1.0, 2.0]);
        assert!(parse_pgm(b"P2\n2 1\n255\n12").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }
}
