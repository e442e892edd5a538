//! Portable float map IO (color "PF" variant only).
//!
//! Files store rows bottom-to-top; in memory the top row comes first.

use std::path::Path;

use super::HdrImage;
use crate::error::{Error, Result};

pub fn write_pfm_bytes(img: &HdrImage) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 12);
    for r in (0..h).rev() {
        let row = &img.data()[r * w * 3..(r + 1) * w * 3];
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_pfm_bytes(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pfm_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn format_err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    /// Next whitespace-delimited token; consumes exactly one trailing whitespace byte.
    fn token(&mut self, what: &str) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.format_err(format!("missing {what}")));
        }
        if self.pos >= self.bytes.len() {
            return Err(self.format_err(format!("header ends inside {what}")));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format {
            offset: start as u64,
            message: format!("{what} is not ASCII"),
        })?;
        self.pos += 1;
        Ok(tok)
    }
}

pub fn read_pfm_bytes(bytes: &[u8]) -> Result<HdrImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token("magic")?;
    match magic {
        "PF" => {}
        "Pf" => {
            return Err(Error::UnsupportedFormat(
                "grayscale PFM (\"Pf\") is not supported; only color \"PF\" files".into(),
            ))
        }
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"PF\""),
            })
        }
    }
    let dim = |cur: &mut Cursor, what: &str| -> Result<usize> {
        let at = cur.pos;
        let tok = cur.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::Format {
                offset: at as u64,
                message: format!("invalid {what} {tok:?}"),
            }),
        }
    };
    let width = dim(&mut cur, "width")?;
    let height = dim(&mut cur, "height")?;
    let at = cur.pos;
    let scale_tok = cur.token("scale")?;
    let scale: f64 = scale_tok.parse().map_err(|_| Error::Format {
        offset: at as u64,
        message: format!("invalid scale {scale_tok:?}"),
    })?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format {
            offset: at as u64,
            message: format!("scale must be nonzero, got {scale_tok:?}"),
        });
    }
    let little = scale < 0.0;

    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| cur.format_err("image dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < count * 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated payload: expected {} bytes after header, found {}",
                count * 4,
                payload.len()
            ),
        });
    }
    if payload.len() > count * 4 {
        return Err(Error::Format {
            offset: (cur.pos + count * 4) as u64,
            message: format!("{} trailing bytes after payload", payload.len() - count * 4),
        });
    }
    let mut data = vec![0.0f64; count];
    let row_len = width * 3;
    for (file_row, chunk) in payload.chunks_exact(row_len * 4).enumerate() {
        let r = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[r * row_len + i] = v as f64;
        }
    }
    HdrImage::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> HdrImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| (rng.gen::<f32>() * 100.0) as f64).collect();
        HdrImage::new(h, w, data).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = write_pfm_bytes(&HdrImage::zeros(64, 128));
        assert!(bytes.starts_with(b"PF\n128 64\n-1.0\n"));
        assert_eq!(bytes.len(), 15 + 64 * 128 * 12);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let img = random_image(4, 8, 7);
        let bytes = write_pfm_bytes(&img);
        let back = read_pfm_bytes(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(write_pfm_bytes(&back), bytes);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let mut img = HdrImage::zeros(2, 1);
        img.set_pixel(0, 0, [1.0, 2.0, 3.0]);
        let bytes = write_pfm_bytes(&img);
        let payload = &bytes[bytes.len() - 24..];
        assert_eq!(&payload[..12], &[0u8; 12]);
        assert_eq!(f32::from_le_bytes(payload[12..16].try_into().unwrap()), 1.0);
    }

    #[test]
    fn big_endian_files_are_read() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [1.5f32, 2.0, -3.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let img = read_pfm_bytes(&bytes).unwrap();
        assert_eq!(img.data(), &[1.5, 2.0, -3.0]);
    }

    #[test]
    fn rejects_malformed_files() {
        let gray = b"Pf\n1 1\n-1.0\n\0\0\0\0";
        assert!(matches!(read_pfm_bytes(gray), Err(Error::UnsupportedFormat(_))));

        assert!(matches!(read_pfm_bytes(b"P6\n1 1\n255\n"), Err(Error::Format { offset: 0, .. })));

        match read_pfm_bytes(b"PF\n0 1\n-1.0\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }

        let mut bytes = write_pfm_bytes(&random_image(2, 2, 1));
        let full = bytes.len();
        bytes.truncate(full - 5);
        match read_pfm_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (full - 5) as u64),
            other => panic!("unexpected {other:?}"),
        }

        assert!(read_pfm_bytes(b"PF\n2 2").is_err());
        assert!(read_pfm_bytes(b"PF\n2 2\n0.0\n").is_err());
    }
}
