//! Binary PPM (P6) and PGM (P5) readers and writers, 8-bit, maxval 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes a [0,1] value to one byte; deterministic round-half-up.
pub fn quantize_u8(v: f32) -> u8 {
    let c = v.clamp(0.0, 1.0);
    (c * 255.0 + 0.5).floor() as u8
}

/// Writes an `[H, W, 3]` tensor with values in [0,1] as binary PPM.
pub fn write_ppm<W: Write>(w: &mut W, pixels: &Tensor) -> Result<()> {
    if pixels.rank() != 3 || pixels.shape()[2] != 3 {
        return Err(Error::InvalidShape {
            op: "write_ppm",
            shape: pixels.shape().to_vec(),
            reason: "expects [H, W, 3]".into(),
        });
    }
    let (h, wid) = (pixels.shape()[0], pixels.shape()[1]);
    write!(w, "P6\n{wid} {h}\n255\n")?;
    let bytes: Vec<u8> = pixels.data().iter().map(|&v| quantize_u8(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_ppm(path: &Path, pixels: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(&mut w, pixels)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary PPM into an `[H, W, 3]` tensor scaled to [0,1].
pub fn read_ppm<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let (w, h, pixels) = parse_netpbm(&buf, b"P6", 3)?;
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_ppm(&mut r)
}

/// Writes raw 8-bit grayscale rows as binary PGM.
pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::format(format!(
            "pgm payload {} bytes, expected {}",
            gray.len(),
            width * height
        )));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    Ok(())
}

/// Reads a binary PGM, returning `(width, height, bytes)`.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_netpbm(&buf, b"P5", 1)
}

pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_pgm(&mut r)
}

/// Shared P5/P6 header parser: magic, whitespace/comments, width,
/// height, maxval 255, single whitespace byte, payload.
fn parse_netpbm(buf: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if buf.len() < 2 || &buf[0..2] != magic {
        return Err(Error::format(format!(
            "expected {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comment lines.
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format("malformed netpbm header"));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .map_err(|_| Error::format("malformed netpbm header"))?
            .parse::<usize>()
            .map_err(|_| Error::format("malformed netpbm header"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if buf.len() < pos + need {
        return Err(Error::format(format!(
            "payload truncated: need {need} bytes, have {}",
            buf.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, buf[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_preserves_quantized_bytes() {
        let pixels = Tensor::new(
            vec![1, 2, 3],
            vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &pixels).unwrap();
        let back = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        for (orig, got) in pixels.data().iter().zip(back.data()) {
            let q = quantize_u8(*orig);
            assert_eq!(quantize_u8(*got), q);
            assert!((got - q as f32 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_header_is_exact() {
        let pixels = Tensor::new(vec![2, 1, 3], vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &pixels).unwrap();
        assert!(buf.starts_with(b"P6\n1 2\n255\n"));
        assert_eq!(buf.len(), b"P6\n1 2\n255\n".len() + 6);
    }

    #[test]
    fn pgm_roundtrip_is_lossless() {
        let gray: Vec<u8> = (0..=255).collect();
        let mut buf = Vec::new();
        write_pgm(&mut buf, 16, 16, &gray).unwrap();
        let (w, h, back) = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(back, gray);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P5\n# a comment\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[7, 9]);
        let (w, h, data) = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(data, vec![7, 9]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(read_ppm(&mut b"P5\n1 1\n255\nx".as_slice()).is_err());
        assert!(read_pgm(&mut b"P5\n4 4\n255\nxy".as_slice()).is_err());
    }
}
