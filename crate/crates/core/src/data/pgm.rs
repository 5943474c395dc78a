//! Grayscale PGM, plain (P2) and raw (P5).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmEncoding {
    Plain,
    Raw,
}

/// Encodes a `[1, H, W]` or `[H, W]` tensor, clamped to `[0, 1]`, at
/// `maxval` levels. Raw samples above 255 take two big-endian bytes.
pub fn encode_pgm(image: &Tensor, maxval: u16, encoding: PgmEncoding) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::Dimension(format!("PGM needs [1,H,W] or [H,W], got {:?}", image.shape()))),
    };
    if maxval == 0 {
        return Err(Error::Format("PGM maxval must be positive".into()));
    }
    let levels: Vec<u16> =
        image.data().iter().map(|v| (v.clamp(0.0, 1.0) * f64::from(maxval)).round() as u16).collect();
    let magic = if encoding == PgmEncoding::Plain { "P2" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    match encoding {
        PgmEncoding::Plain => {
            for row in levels.chunks(w) {
                let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                out.extend_from_slice(line.as_bytes());
                out.push(b'\n');
            }
        }
        PgmEncoding::Raw if maxval < 256 => out.extend(levels.iter().map(|&v| v as u8)),
        PgmEncoding::Raw => levels.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes())),
    }
    Ok(out)
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        loop {
            match self.rest.first() {
                Some(b) if b.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self.rest.iter().position(|&b| b == b'\n').unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let len = self.rest.iter().take_while(|b| b.is_ascii_digit()).count();
        let text = std::str::from_utf8(&self.rest[..len]).expect("ascii digits");
        self.rest = &self.rest[len..];
        text.parse().map_err(|_| Error::Format(format!("PGM header: missing or bad {what}")))
    }
}

/// Decodes P2 or P5 into a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let raw = match bytes.get(..2) {
        Some(b"P2") => false,
        Some(b"P5") => true,
        _ => return Err(Error::Format("not a PGM file: expected P2 or P5".into())),
    };
    let mut hdr = Header { rest: &bytes[2..] };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("PGM size {w}x{h} is empty")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} is outside 1..=65535")));
    }
    let n = w * h;
    let levels: Vec<usize> = if raw {
        match hdr.rest.first() {
            Some(b) if b.is_ascii_whitespace() => {}
            _ => return Err(Error::Format("PGM header must end with one whitespace byte".into())),
        }
        let body = &hdr.rest[1..];
        let width = if maxval < 256 { 1 } else { 2 };
        if body.len() != n * width {
            return Err(Error::Format(format!("PGM body has {} bytes, expected {}", body.len(), n * width)));
        }
        if width == 1 {
            body.iter().map(|&b| b as usize).collect()
        } else {
            body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
        }
    } else {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(hdr.number("sample")?);
        }
        hdr.skip_space();
        if !hdr.rest.is_empty() {
            return Err(Error::Format("trailing data after PGM samples".into()));
        }
        v
    };
    if let Some(bad) = levels.iter().find(|&&v| v > maxval) {
        return Err(Error::Format(format!("PGM sample {bad} exceeds maxval {maxval}")));
    }
    let scale = maxval as f64;
    Tensor::new(vec![1, h, w], levels.into_iter().map(|v| v as f64 / scale).collect())
}

/// Writes 16-bit raw PGM.
pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(image, u16::MAX, PgmEncoding::Raw)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_fn(&[1, 3, 5], |i| i as f64 / 14.0)
    }

    #[test]
    fn sixteen_bit_round_trip_within_quantization() {
        let img = ramp();
        let back = decode_pgm(&encode_pgm(&img, 65535, PgmEncoding::Raw).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn plain_and_raw_agree() {
        for maxval in [255, 1000, 65535] {
            let p2 = decode_pgm(&encode_pgm(&ramp(), maxval, PgmEncoding::Plain).unwrap()).unwrap();
            let p5 = decode_pgm(&encode_pgm(&ramp(), maxval, PgmEncoding::Raw).unwrap()).unwrap();
            assert_eq!(p2, p5);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let t = decode_pgm(b"P2 # made by hand\n2 1\n# levels\n4\n0 4\n").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_files_are_format_errors() {
        for bytes in [
            &b"P2\n2 1\n0\n0 0\n"[..],
            b"P6\n1 1\n255\n\0\0\0",
            b"P2\n2 1\n70000\n0 0\n",
            b"P2\n2 1\n10\n0\n",
            b"P2\n2 1\n10\n0 11\n",
            b"P5\n2 1\n255\n\0",
            b"P2\nx 1\n10\n0\n",
        ] {
            assert!(matches!(decode_pgm(bytes), Err(Error::Format(_))), "{:?}", String::from_utf8_lossy(bytes));
        }
    }
}
