//! Bouncing-digit sequences.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{GlyphSet, GlyphSource};
use super::{DatasetSource, SequenceDataset, SplitManifest};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MovingDigitsConfig {
    pub count: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub digits: usize,
    pub glyphs: GlyphSource,
    /// Speed in pixels per frame is drawn uniformly from `[min_speed, max_speed]`.
    pub min_speed: f64,
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for MovingDigitsConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            seq_len: 20,
            height: 64,
            width: 64,
            digits: 2,
            glyphs: GlyphSource::Bundled { scale: 4 },
            min_speed: 2.0,
            max_speed: 4.0,
            seed: 0,
        }
    }
}

/// One digit's straight-line motion, `(y, x)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitTrack {
    pub glyph: usize,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

/// Position after `t` frames of constant velocity inside `[0, max]`, reflecting at both walls.
pub fn bounce_position(start: f64, velocity: f64, t: usize, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let y = (start + velocity * t as f64).rem_euclid(2.0 * max);
    if y <= max {
        y
    } else {
        2.0 * max - y
    }
}

/// Renders `tracks` into `seq_len` grayscale frames `(n, 1, H, W)`, compositing by pixel max.
pub fn render_sequence(
    tracks: &[DigitTrack],
    glyphs: &GlyphSet,
    seq_len: usize,
    (height, width): (usize, usize),
) -> Result<Vec<u8>> {
    let mut out = vec![0u8; seq_len * height * width];
    for tr in tracks {
        if tr.glyph >= glyphs.len() {
            return Err(input_err!("glyph {} out of range ({} glyphs)", tr.glyph, glyphs.len()));
        }
        let g = glyphs.get(tr.glyph);
        if g.height > height || g.width > width {
            return Err(input_err!(
                "{}x{} canvas is smaller than a {}x{} glyph",
                height,
                width,
                g.height,
                g.width
            ));
        }
        let (my, mx) = ((height - g.height) as f64, (width - g.width) as f64);
        for t in 0..seq_len {
            let y0 = bounce_position(tr.start.0, tr.velocity.0, t, my).round() as usize;
            let x0 = bounce_position(tr.start.1, tr.velocity.1, t, mx).round() as usize;
            let frame = &mut out[t * height * width..(t + 1) * height * width];
            for y in 0..g.height {
                for x in 0..g.width {
                    let p = &mut frame[(y0 + y) * width + x0 + x];
                    *p = (*p).max(g.at(y, x));
                }
            }
        }
    }
    Ok(out)
}

fn sample_tracks(cfg: &MovingDigitsConfig, glyphs: &GlyphSet, stream: u64) -> Vec<DigitTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..cfg.digits)
        .map(|_| {
            let glyph = rng.random_range(0..glyphs.len());
            let g = glyphs.get(glyph);
            let my = (cfg.height - g.height) as f64;
            let mx = (cfg.width - g.width) as f64;
            let start = (rng.random::<f64>() * my, rng.random::<f64>() * mx);
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let speed = cfg.min_speed + rng.random::<f64>() * (cfg.max_speed - cfg.min_speed);
            DigitTrack {
                glyph,
                start,
                velocity: (speed * angle.sin(), speed * angle.cos()),
            }
        })
        .collect()
}

fn check(cfg: &MovingDigitsConfig, glyphs: &GlyphSet) -> Result<()> {
    let (gh, gw) = glyphs.max_size();
    if gh > cfg.height || gw > cfg.width {
        return Err(input_err!(
            "{}x{} canvas is smaller than a {gh}x{gw} glyph",
            cfg.height,
            cfg.width
        ));
    }
    if cfg.seq_len == 0 || cfg.digits == 0 {
        return Err(input_err!("need at least one frame and one digit"));
    }
    if !(0.0..=cfg.max_speed).contains(&cfg.min_speed) {
        return Err(input_err!("speed range [{}, {}] is invalid", cfg.min_speed, cfg.max_speed));
    }
    Ok(())
}

fn generate_streams(
    cfg: &MovingDigitsConfig,
    glyphs: &GlyphSet,
    streams: impl Iterator<Item = u64>,
    prefix: &str,
) -> Result<SequenceDataset> {
    let mut ids = Vec::new();
    let mut pixels = Vec::new();
    for s in streams {
        let tracks = sample_tracks(cfg, glyphs, s);
        pixels.extend(render_sequence(&tracks, glyphs, cfg.seq_len, (cfg.height, cfg.width))?);
        ids.push(format!("{prefix}-{s:08}"));
    }
    SequenceDataset::new(
        DatasetSource::Synthetic(cfg.clone()),
        cfg.seq_len,
        1,
        (cfg.height, cfg.width),
        ids,
        pixels,
    )
}

/// `cfg.count` sequences; sequence `i` depends only on `(seed, i)`.
pub fn generate_moving_digits(cfg: &MovingDigitsConfig) -> Result<SequenceDataset> {
    let glyphs = GlyphSet::from_source(&cfg.glyphs)?;
    check(cfg, &glyphs)?;
    generate_streams(cfg, &glyphs, 0..cfg.count as u64, "train")
}

const TEST_STREAM_BASE: u64 = 1 << 40;

/// Disjoint train and test sets. Test sequences come from a separate random
/// stream; any that happen to duplicate a training sequence are replaced.
pub fn generate_split(
    cfg: &MovingDigitsConfig,
    test_count: usize,
) -> Result<(SequenceDataset, SequenceDataset, SplitManifest)> {
    let glyphs = GlyphSet::from_source(&cfg.glyphs)?;
    check(cfg, &glyphs)?;
    let train = generate_streams(cfg, &glyphs, 0..cfg.count as u64, "train")?;
    let seen: BTreeSet<String> = (0..train.len()).map(|i| train.sequence_hash(i)).collect();
    let mut streams = Vec::with_capacity(test_count);
    let mut s = TEST_STREAM_BASE;
    let mut hashes = BTreeSet::new();
    while streams.len() < test_count {
        let one = generate_streams(cfg, &glyphs, std::iter::once(s), "test")?;
        let h = one.sequence_hash(0);
        if seen.contains(&h) || !hashes.insert(h) {
            log::info!("dropping test stream {s}: duplicates an existing sequence");
        } else {
            streams.push(s);
        }
        s += 1;
    }
    let test_cfg = MovingDigitsConfig {
        count: test_count,
        ..cfg.clone()
    };
    let test = generate_streams(&test_cfg, &glyphs, streams.into_iter(), "test")?;
    let manifest = SplitManifest::new(cfg.seed, &train, &test);
    Ok((train, test, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(count: usize) -> MovingDigitsConfig {
        MovingDigitsConfig {
            count,
            seq_len: 20,
            height: 32,
            width: 32,
            digits: 1,
            glyphs: GlyphSource::Bundled { scale: 2 },
            seed: 9,
            ..Default::default()
        }
    }

    // independent oracle: step the position one frame at a time, flipping the velocity at the walls
    fn simulate(start: f64, v: f64, t: usize, max: f64) -> f64 {
        let (mut p, mut v) = (start, v);
        for _ in 0..t {
            p += v;
            loop {
                if p < 0.0 {
                    p = -p;
                    v = -v;
                } else if p > max {
                    p = 2.0 * max - p;
                    v = -v;
                } else {
                    break;
                }
            }
        }
        p
    }

    #[test]
    fn two_digit_64px_protocol_shape() {
        let cfg = MovingDigitsConfig {
            count: 3,
            ..Default::default()
        };
        let d = generate_moving_digits(&cfg).unwrap();
        assert_eq!((d.len(), d.seq_len(), d.frame_size(), d.channels()), (3, 20, (64, 64), 1));
    }

    #[test]
    fn zero_velocity_frames_identical() {
        let g = GlyphSet::bundled(2).unwrap();
        let tr = DigitTrack {
            glyph: 3,
            start: (5.0, 7.0),
            velocity: (0.0, 0.0),
        };
        let px = render_sequence(&[tr], &g, 6, (32, 32)).unwrap();
        let f0 = &px[..1024];
        assert!(px.chunks(1024).all(|f| f == f0));
        assert!(f0.iter().any(|&v| v > 0));
    }

    #[test]
    fn rendered_bounding_box_follows_bounce() {
        let g = GlyphSet::bundled(2).unwrap();
        // "8" fills its whole 10x14 box
        let tr = DigitTrack {
            glyph: 8,
            start: (3.0, 20.0),
            velocity: (2.5, 3.25),
        };
        let (h, w) = (32usize, 32usize);
        let px = render_sequence(&[tr], &g, 20, (h, w)).unwrap();
        for t in 0..20 {
            let f = &px[t * h * w..(t + 1) * h * w];
            let rows: Vec<usize> = (0..h).filter(|y| (0..w).any(|x| f[y * w + x] > 0)).collect();
            let cols: Vec<usize> = (0..w).filter(|x| (0..h).any(|y| f[y * w + x] > 0)).collect();
            let ey = simulate(3.0, 2.5, t, 18.0).round() as usize;
            let ex = simulate(20.0, 3.25, t, 22.0).round() as usize;
            assert_eq!((rows[0], cols[0]), (ey, ex), "frame {t}");
        }
    }

    #[test]
    fn canvas_smaller_than_glyph() {
        let cfg = MovingDigitsConfig {
            height: 12,
            ..small(1)
        };
        assert!(matches!(generate_moving_digits(&cfg), Err(crate::Error::Input(_))));
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = generate_moving_digits(&small(5)).unwrap();
        let b = generate_moving_digits(&small(5)).unwrap();
        let c = generate_moving_digits(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequence(2), c.sequence(2));
        let other = generate_moving_digits(&MovingDigitsConfig { seed: 10, ..small(5) }).unwrap();
        assert_ne!(a.sequence(0), other.sequence(0));
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let (tr, te, m) = generate_split(&small(30), 10).unwrap();
        assert_eq!((tr.len(), te.len()), (30, 10));
        assert!(m.overlap().is_empty());
        let (_, _, m2) = generate_split(&small(30), 10).unwrap();
        assert_eq!(m, m2);
    }

    proptest! {
        #[test]
        fn bounce_matches_simulation(start in 0.0f64..20.0, v in -7.0f64..7.0, t in 0usize..40) {
            let max = 20.0;
            let got = bounce_position(start, v, t, max);
            let want = simulate(start, v, t, max);
            prop_assert!((0.0..=max).contains(&got));
            prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        }
    }
}
