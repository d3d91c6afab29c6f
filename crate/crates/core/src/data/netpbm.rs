//! Binary 8-bit PGM (P5) and PPM (P6).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// 1 for gray, 3 for RGB.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(
            data.len(),
            width * height * channels,
            "sample count does not match extents"
        );
        Image8 {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes).map_err(|(offset, msg)| Error::Format {
            path: path.to_path_buf(),
            offset,
            msg,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, (usize, String)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, format!("{what} out of range")))
    }
}

/// Decodes P5/P6; errors carry the byte offset where parsing stopped.
pub fn decode(bytes: &[u8]) -> std::result::Result<Image8, (usize, String)> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err((0, "expected magic P5 or P6".into())),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err((maxval_at, format!("maxval {maxval} is not an 8-bit range")));
    }
    if width == 0 || height == 0 {
        return Err((maxval_at, format!("empty image {width}x{height}")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => {
            return Err((
                c.pos,
                "expected one whitespace byte before the raster".into(),
            ))
        }
    }
    let need = width * height * channels;
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        return Err((
            bytes.len(),
            format!(
                "raster truncated: {need} bytes expected, {} present",
                raster.len()
            ),
        ));
    }
    let mut data = raster[..need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    Ok(Image8::new(width, height, channels, data))
}
