//! Frame-directory ingestion.
//!
//! Layout: `root/<video>/<frame>.{png,jpg,jpeg,gif}`, one folder per video,
//! frames ordered by file name.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSource, SequenceDataset, SplitManifest};
use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadFramePolicy {
    /// Drop the frame with a warning; the video's remaining frames stay in order.
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// `(height, width)` to resize every frame to before cropping.
    pub resize: Option<(usize, usize)>,
    /// Frames are center-cropped so both sides are multiples of this.
    pub divisor: usize,
    pub seq_len: usize,
    pub stride: usize,
    /// Fraction of videos (not clips) assigned to the test split.
    pub test_fraction: f64,
    pub seed: u64,
    pub on_bad_frame: BadFramePolicy,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            resize: None,
            divisor: 16,
            seq_len: 20,
            stride: 10,
            test_fraction: 0.1,
            seed: 0,
            on_bad_frame: BadFramePolicy::Skip,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub train: SequenceDataset,
    pub test: SequenceDataset,
    pub manifest: SplitManifest,
}

/// Number of `seq_len`-frame windows a `frames`-frame video yields at `stride`.
pub fn window_count(frames: usize, seq_len: usize, stride: usize) -> usize {
    if frames < seq_len || stride == 0 {
        0
    } else {
        (frames - seq_len) / stride + 1
    }
}

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "gif"];

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if want_dirs && p.is_dir() {
            out.push(p);
        } else if !want_dirs && p.is_file() {
            let ext = p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
            if ext.is_some_and(|x| EXTENSIONS.contains(&x.as_str())) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_frame(path: &Path, cfg: &IngestConfig) -> Result<(usize, usize, Vec<u8>)> {
    let mut img = image::open(path)?.to_rgb8();
    if let Some((h, w)) = cfg.resize {
        img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let d = cfg.divisor.max(1);
    let (ch, cw) = (h / d * d, w / d * d);
    if ch == 0 || cw == 0 {
        return Err(input_err!("{}: {h}x{w} frame is smaller than the divisor {d}", path.display()));
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let mut px = vec![0u8; 3 * ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let p = img.get_pixel((ox + x) as u32, (oy + y) as u32);
            for c in 0..3 {
                px[(c * ch + y) * cw + x] = p[c];
            }
        }
    }
    Ok((ch, cw, px))
}

/// Reads every video under `root`, windows it into clips and splits the videos into train and test.
pub fn ingest_directory(root: &Path, cfg: &IngestConfig) -> Result<IngestOutput> {
    if cfg.seq_len == 0 || cfg.stride == 0 {
        return Err(input_err!("seq_len and stride must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(input_err!("test_fraction must be in [0, 1)"));
    }
    let videos = sorted_entries(root, true)?;
    if videos.is_empty() {
        return Err(input_err!("{}: no video folders", root.display()));
    }
    let mut size: Option<(usize, usize)> = None;
    // (video name, frames)
    let mut loaded: Vec<(String, Vec<Vec<u8>>)> = Vec::new();
    for v in &videos {
        let name = v.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut frames = Vec::new();
        for f in sorted_entries(v, false)? {
            match load_frame(&f, cfg) {
                Ok((h, w, px)) => {
                    match size {
                        None => size = Some((h, w)),
                        Some(s) if s != (h, w) => {
                            return Err(input_err!(
                                "{}: frame is {h}x{w} after preprocessing, earlier frames were {}x{}; set `resize`",
                                f.display(),
                                s.0,
                                s.1
                            ))
                        }
                        _ => {}
                    }
                    frames.push(px);
                }
                Err(e) if cfg.on_bad_frame == BadFramePolicy::Skip => {
                    log::warn!("skipping unreadable frame {}: {e}", f.display());
                }
                Err(e) => return Err(e),
            }
        }
        loaded.push((name, frames));
    }
    let (h, w) = size.ok_or_else(|| input_err!("{}: no readable frames", root.display()))?;

    let mut order: Vec<usize> = (0..loaded.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((loaded.len() as f64) * cfg.test_fraction).round() as usize;
    let mut is_test = vec![false; loaded.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let build = |test: bool| -> Result<SequenceDataset> {
        let mut ids = Vec::new();
        let mut pixels = Vec::new();
        for (i, (name, frames)) in loaded.iter().enumerate() {
            if is_test[i] != test {
                continue;
            }
            for k in 0..window_count(frames.len(), cfg.seq_len, cfg.stride) {
                let start = k * cfg.stride;
                for f in &frames[start..start + cfg.seq_len] {
                    pixels.extend_from_slice(f);
                }
                ids.push(format!("{name}/{start:06}"));
            }
        }
        SequenceDataset::new(
            DatasetSource::Directory {
                root: root.to_path_buf(),
                stride: cfg.stride,
            },
            cfg.seq_len,
            3,
            (h, w),
            ids,
            pixels,
        )
    };
    let train = build(false)?;
    let test = build(true)?;
    let manifest = SplitManifest::new(cfg.seed, &train, &test);
    Ok(IngestOutput { train, test, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(100, 20, 10), 9);
        assert_eq!(window_count(100, 20, 20), 5);
        assert_eq!(window_count(19, 20, 1), 0);
        assert_eq!(window_count(20, 20, 7), 1);
    }

    fn write_video(dir: &Path, name: &str, frames: usize, (h, w): (u32, u32), offset: u8) {
        let v = dir.join(name);
        std::fs::create_dir_all(&v).unwrap();
        for f in 0..frames {
            let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([f as u8 + offset, x as u8, y as u8]));
            img.save(v.join(format!("{f:04}.png"))).unwrap();
        }
    }

    #[test]
    fn ingest_windows_crops_and_splits_by_video() {
        let dir = tempfile::tempdir().unwrap();
        write_video(dir.path(), "a", 25, (18, 21), 0);
        write_video(dir.path(), "b", 12, (18, 21), 100);
        std::fs::write(dir.path().join("b").join("0005.png"), b"not a png").unwrap();
        let cfg = IngestConfig {
            divisor: 8,
            seq_len: 5,
            stride: 5,
            test_fraction: 0.5,
            ..Default::default()
        };
        let out = ingest_directory(dir.path(), &cfg).unwrap();
        assert_eq!(out.train.frame_size(), (16, 16));
        // "a" gives 5 clips, "b" keeps 11 readable frames and gives 2
        let mut counts = [out.train.len(), out.test.len()];
        counts.sort();
        assert_eq!(counts, [2, 5]);
        assert!(out.manifest.overlap().is_empty());
        let a = if out.train.len() == 5 { &out.train } else { &out.test };
        // center crop of an 18x21 frame to 16x16 starts at (1, 2)
        let seq = a.sequence(1);
        assert_eq!(seq[0], 5); // red channel carries the frame index: clip 1 starts at frame 5
        assert_eq!(seq[16 * 16], 2); // green = x
        assert_eq!(seq[2 * 16 * 16], 1); // blue = y

        let strict = IngestConfig {
            on_bad_frame: BadFramePolicy::Abort,
            ..cfg
        };
        assert!(ingest_directory(dir.path(), &strict).is_err());
    }

    #[test]
    fn resize_to_target() {
        let dir = tempfile::tempdir().unwrap();
        write_video(dir.path(), "v", 3, (40, 50), 0);
        let cfg = IngestConfig {
            resize: Some((128, 160)),
            seq_len: 2,
            stride: 1,
            test_fraction: 0.0,
            ..Default::default()
        };
        let out = ingest_directory(dir.path(), &cfg).unwrap();
        assert_eq!(out.train.frame_size(), (128, 160));
        assert_eq!(out.train.len(), 2);
    }
}
