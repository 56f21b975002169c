//! Frame grids and animations.

use std::path::Path;

use anyhow::{Context, Result};
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, RgbaImage};

const FRAME_DELAY_MS: u32 = 200;

/// Maps `[0, 1]` to 8 bits, rounding half to even. Out-of-range values saturate.
pub fn quantize(v: f32) -> u8 {
    ((v as f64).clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Pixel `(y, x)` of a channel-major `(3, h, w)` frame.
fn pixel(frame: &[f32], h: usize, w: usize, y: usize, x: usize) -> Rgb<u8> {
    let p = h * w;
    let at = y * w + x;
    Rgb([quantize(frame[at]), quantize(frame[p + at]), quantize(frame[2 * p + at])])
}

/// One row per entry of `rows`, frames left to right, no gaps.
pub fn frame_grid(rows: &[Vec<Vec<f32>>], h: usize, w: usize) -> RgbImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut img = RgbImage::new((cols * w) as u32, (rows.len() * h) as u32);
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel((c * w + x) as u32, (r * h + y) as u32, pixel(frame, h, w, y, x));
                }
            }
        }
    }
    img
}

/// Looping GIF whose k-th frame shows truth `k` (left) beside prediction `k` (right).
pub fn write_animation(path: &Path, truth: &[Vec<f32>], predicted: &[Vec<f32>], h: usize, w: usize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)?;
    let frames = truth.iter().zip(predicted).map(|(t, p)| {
        let pair = frame_grid(&[vec![t.clone(), p.clone()]], h, w);
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(pair).into_rgba8();
        Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(FRAME_DELAY_MS, 1))
    });
    enc.encode_frames(frames)
        .with_context(|| format!("writing {}", path.display()))
}

/// Sequence id made safe for a file name.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_to_even() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(7.0), 255);
        // 0.5 is the only f32 in [0, 1] that lands exactly on a tie
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.498_039_2), 127);
    }

    #[test]
    fn grid_places_rows_and_columns() {
        let (h, w) = (2, 3);
        let frame = |v: f32| vec![v; 3 * h * w];
        let g = frame_grid(&[vec![frame(0.0), frame(1.0)], vec![frame(0.5), frame(0.2)]], h, w);
        assert_eq!(g.dimensions(), (6, 4));
        assert_eq!(g.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(g.get_pixel(3, 1).0, [255, 255, 255]);
        assert_eq!(g.get_pixel(2, 2).0, [128, 128, 128]);
        assert_eq!(g.get_pixel(5, 3).0, [51, 51, 51]);
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("walk/000010"), "walk_000010");
        assert_eq!(file_stem("test-3"), "test-3");
    }
}
