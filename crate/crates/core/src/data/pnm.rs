//! Binary graymap (`P5`) and pixmap (`P6`) images, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for `P5`, 3 for `P6`.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape("Image::new", &[height, width, channels], &[data.len()]));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Quantizes a `[H × W × C]` tensor in `[0, 1]` with `round(v·255)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = match t.shape() {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::shape("Image::from_tensor", s, &[0, 0, 0])),
        };
        let data = t.data().iter().map(|&v| quantize(v)).collect();
        Image::new(w, h, c, data)
    }

    /// `[H × W × C]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as Scalar / 255.0).collect();
        Tensor::new(&[self.height, self.width, self.channels], data).expect("image buffer matches its shape")
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn quantize(v: Scalar) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::ImageFormat {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.bytes.len() {
                self.err(start, format!("header ends before {what}"))
            } else {
                self.err(start, format!("expected {what}, found byte 0x{:02x}", self.bytes[start]))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(start, format!("{what} is out of range")))
    }
}

/// Parses a `P5`/`P6` byte stream. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut c = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err(0, "expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(c.err(maxval_at, format!("maxval {maxval} is not supported (only 255)")));
    }
    match bytes.get(c.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => c.pos += 1,
        _ => return Err(c.err(c.pos, "expected a single whitespace byte after maxval")),
    }
    let need = width * height * channels;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(c.err(bytes.len(), format!("payload truncated: expected {need} bytes, found {have}")));
    }
    if have > need {
        return Err(c.err(c.pos + need, format!("{} unexpected trailing bytes", have - need)));
    }
    Image::new(width, height, channels, bytes[c.pos..].to_vec())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, img.encode()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn p() -> &'static Path {
        Path::new("mem.pgm")
    }

    #[test]
    fn round_trip_bytes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for channels in [1, 3] {
            let data: Vec<u8> = (0..5 * 7 * channels).map(|_| rng.random()).collect();
            let img = Image::new(5, 7, channels, data).unwrap();
            assert_eq!(decode(&img.encode(), p()).unwrap(), img);
        }
    }

    #[test]
    fn graymap_header_layout() {
        let img = Image::new(64, 64, 1, vec![7; 4096]).unwrap();
        let bytes = img.encode();
        let header = b"P5\n64 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 4096);
    }

    #[test]
    fn quantization_error_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::uniform(&[9, 11, 3], 1.0, &mut rng).map(|v| v.abs());
        let back = Image::from_tensor(&t).unwrap().to_tensor();
        assert!(t.max_abs_diff(&back) <= 1.0 / 255.0);
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode(b"P5\n# made by hand\n2 1\n255\n\x01\x02", p()).unwrap();
        assert_eq!(img.data, vec![1, 2]);
    }

    #[test]
    fn errors_name_byte_offsets() {
        let offset = |bytes: &[u8]| match decode(bytes, p()) {
            Err(Error::ImageFormat { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(b"P3\n1 1\n255\n\x00"), 0);
        assert_eq!(offset(b"P5\n1 x\n255\n\x00"), 5);
        assert_eq!(offset(b"P5\n1 1\n65535\n\x00\x00"), 6);
        assert_eq!(offset(b"P5\n2 2\n255\n\x00"), 12);
        let msg = decode(b"P5\n2 2\n255\n\x00", p()).unwrap_err().to_string();
        assert!(msg.contains("byte 12") && msg.contains("truncated"), "{msg}");
    }
}
