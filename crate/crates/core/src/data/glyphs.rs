//! Digit glyphs: a bundled 5x7 bitmap font, or images read from IDX files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub height: usize,
    pub width: usize,
    /// Row-major 8-bit intensities.
    pub pixels: Vec<u8>,
}

impl Glyph {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width || pixels.is_empty() {
            return Err(input_err!("glyph of {} pixels is not {height}x{width}", pixels.len()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

// 5 columns x 7 rows, most significant of the low 5 bits is the left column.
const FONT: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Where digit glyphs come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GlyphSource {
    /// The built-in font, each font pixel drawn as a `scale x scale` block.
    Bundled { scale: usize },
    /// An IDX image file such as the handwritten-digit training images.
    Idx { path: std::path::PathBuf, limit: Option<usize> },
}

#[derive(Debug, Clone)]
pub struct GlyphSet {
    glyphs: Vec<Glyph>,
}

impl GlyphSet {
    pub fn bundled(scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(input_err!("glyph scale must be positive"));
        }
        let glyphs = FONT
            .iter()
            .map(|rows| {
                let (h, w) = (7 * scale, 5 * scale);
                let mut px = vec![0u8; h * w];
                for y in 0..h {
                    for x in 0..w {
                        if rows[y / scale] >> (4 - x / scale) & 1 == 1 {
                            px[y * w + x] = 255;
                        }
                    }
                }
                Glyph::new(h, w, px)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { glyphs })
    }

    pub fn from_glyphs(glyphs: Vec<Glyph>) -> Result<Self> {
        if glyphs.is_empty() {
            return Err(input_err!("empty glyph set"));
        }
        Ok(Self { glyphs })
    }

    pub fn from_source(source: &GlyphSource) -> Result<Self> {
        match source {
            GlyphSource::Bundled { scale } => Self::bundled(*scale),
            GlyphSource::Idx { path, limit } => {
                let mut g = load_idx_images(path)?;
                if let Some(n) = limit {
                    g.truncate(*n);
                }
                Self::from_glyphs(g)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn get(&self, i: usize) -> &Glyph {
        &self.glyphs[i]
    }

    /// Largest glyph extent, `(height, width)`.
    pub fn max_size(&self) -> (usize, usize) {
        self.glyphs
            .iter()
            .fold((0, 0), |(h, w), g| (h.max(g.height), w.max(g.width)))
    }
}

/// Reads an IDX3 unsigned-byte image file (magic `0x00000803`).
pub fn load_idx_images(path: &Path) -> Result<Vec<Glyph>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes).map_err(|e| match e {
        Error::Input(m) => input_err!("{}: {m}", path.display()),
        other => other,
    })
}

fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Glyph>> {
    let be = |i: usize| -> Result<usize> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| input_err!("truncated IDX header"))
    };
    if be(0)? != 0x0803 {
        return Err(input_err!("not an IDX3 u8 image file (magic {:#x})", be(0)?));
    }
    let (n, h, w) = (be(4)?, be(8)?, be(12)?);
    let body = &bytes[16..];
    if body.len() < n * h * w {
        return Err(input_err!("IDX file holds {} bytes, header promises {}", body.len(), n * h * w));
    }
    body.chunks_exact(h * w)
        .take(n)
        .map(|c| Glyph::new(h, w, c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_font_scales() {
        let g = GlyphSet::bundled(3).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.max_size(), (21, 15));
        // top row of "7" is solid
        let seven = g.get(7);
        assert!((0..15).all(|x| seven.at(0, x) == 255));
        // "1" has a hole at its top-left corner
        assert_eq!(g.get(1).at(0, 0), 0);
        assert!(GlyphSet::bundled(0).is_err());
    }

    #[test]
    fn idx_parse() {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        b.extend(1..=12u8);
        let g = parse_idx_images(&b).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].at(1, 2), 12);
        assert!(parse_idx_images(&b[..20]).is_err());
        b[3] = 1;
        assert!(parse_idx_images(&b).is_err());
    }
}
