//! Frame-sequence datasets.
//!
//! Frames are stored as 8-bit pixels, `(N, n, C, H, W)` with `C` either 1
//! (grayscale, replicated to RGB when batched) or 3. Pixel value `v` maps to
//! `v / 255` in `[0, 1]`.

mod glyphs;
mod ingest;
mod moving;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, input_err, Error, Result};

pub use glyphs::{load_idx_images, Glyph, GlyphSet, GlyphSource};
pub use ingest::{ingest_directory, window_count, BadFramePolicy, IngestConfig, IngestOutput};
pub use moving::{
    bounce_position, generate_moving_digits, generate_split, render_sequence, DigitTrack, MovingDigitsConfig,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(MovingDigitsConfig),
    Directory { root: PathBuf, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    source: DatasetSource,
    seq_len: usize,
    channels: usize,
    height: usize,
    width: usize,
    ids: Vec<String>,
    pixels: Vec<u8>,
}

impl SequenceDataset {
    pub fn new(
        source: DatasetSource,
        seq_len: usize,
        channels: usize,
        (height, width): (usize, usize),
        ids: Vec<String>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(input_err!("datasets hold 1 or 3 channels, got {channels}"));
        }
        if seq_len == 0 || height == 0 || width == 0 {
            return Err(input_err!("empty frame geometry {seq_len}x{height}x{width}"));
        }
        let per = seq_len * channels * height * width;
        if pixels.len() != per * ids.len() {
            return Err(dim_err!(
                "{} pixels do not hold {} sequences of {per}",
                pixels.len(),
                ids.len()
            ));
        }
        Ok(Self {
            source,
            seq_len,
            channels,
            height,
            width,
            ids,
            pixels,
        })
    }

    pub fn source(&self) -> &DatasetSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn sequence_len(&self) -> usize {
        self.seq_len * self.channels * self.height * self.width
    }

    /// Raw 8-bit pixels of sequence `i`, `(n, C, H, W)`.
    pub fn sequence(&self, i: usize) -> &[u8] {
        let per = self.sequence_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn sequence_hash(&self, i: usize) -> String {
        hex::encode(Sha256::digest(self.sequence(i)))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Sequences `indices` as an RGB float batch `(B, n, 3, H, W)` in `[0, 1]`.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let (n, h, w) = (self.seq_len, self.height, self.width);
        let plane = h * w;
        let mut out = Vec::with_capacity(indices.len() * n * 3 * plane);
        for &i in indices {
            if i >= self.len() {
                return Err(input_err!("sequence {i} out of range ({} sequences)", self.len()));
            }
            let seq = self.sequence(i);
            for f in 0..n {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c };
                    let off = (f * self.channels + src) * plane;
                    out.extend(seq[off..off + plane].iter().map(|&v| v as f32 / 255.0));
                }
            }
        }
        let t = Tensor::from_vec(out, (indices.len(), n, 3, h, w), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Keeps the sequences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.sequence_len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(input_err!("sequence {i} out of range ({} sequences)", self.len()));
            }
            pixels.extend_from_slice(self.sequence(i));
            ids.push(self.ids[i].clone());
        }
        Self::new(
            self.source.clone(),
            self.seq_len,
            self.channels,
            (self.height, self.width),
            ids,
            pixels,
        )
    }

    pub fn manifest_entries(&self) -> Vec<ClipEntry> {
        (0..self.len())
            .map(|i| ClipEntry {
                id: self.ids[i].clone(),
                hash: self.sequence_hash(i),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let shape = vec![self.len(), self.seq_len, self.channels, self.height, self.width];
        let view = TensorView::new(StDtype::U8, shape, &self.pixels).map_err(|e| Error::Format(e.to_string()))?;
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), DATASET_FORMAT_VERSION.to_string());
        meta.insert("source".to_string(), serde_json::to_string(&self.source)?);
        meta.insert("ids".to_string(), serde_json::to_string(&self.ids)?);
        safetensors::serialize_to_file([("frames", view)], Some(meta), path).map_err(|e| match e {
            safetensors::SafeTensorError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Format(format!("{}: dataset file has no metadata", path.display())))?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("{}: dataset metadata lacks {k}", path.display())))
        };
        let version: u32 = field("format_version")?
            .parse()
            .map_err(|_| Error::Format("bad dataset format version".into()))?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset format version {version}")));
        }
        let source: DatasetSource = serde_json::from_str(field("source")?)?;
        let ids: Vec<String> = serde_json::from_str(field("ids")?)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        let frames = st.tensor("frames").map_err(|e| Error::Format(e.to_string()))?;
        if frames.dtype() != StDtype::U8 || frames.shape().len() != 5 {
            return Err(Error::Format(format!(
                "frames must be u8 of rank 5, got {:?} {:?}",
                frames.dtype(),
                frames.shape()
            )));
        }
        let s = frames.shape();
        if s[0] != ids.len() {
            return Err(Error::Format(format!("{} sequences but {} ids", s[0], ids.len())));
        }
        Self::new(source, s[1], s[2], (s[3], s[4]), ids, frames.data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub hash: String,
}

/// Which clips went where, with content hashes so a split can be verified later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub seed: u64,
    pub train: Vec<ClipEntry>,
    pub test: Vec<ClipEntry>,
}

impl SplitManifest {
    pub fn new(seed: u64, train: &SequenceDataset, test: &SequenceDataset) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            train: train.manifest_entries(),
            test: test.manifest_entries(),
        }
    }

    /// Hashes present in both halves.
    pub fn overlap(&self) -> Vec<String> {
        let train: BTreeSet<&str> = self.train.iter().map(|c| c.hash.as_str()).collect();
        self.test
            .iter()
            .filter(|c| train.contains(c.hash.as_str()))
            .map(|c| c.hash.clone())
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn tiny() -> SequenceDataset {
        let pixels: Vec<u8> = (0..2 * 3 * 4 * 4).map(|i| (i * 5 % 256) as u8).collect();
        SequenceDataset::new(
            DatasetSource::Directory {
                root: "x".into(),
                stride: 1,
            },
            3,
            1,
            (4, 4),
            vec!["a".into(), "b".into()],
            pixels,
        )
        .unwrap()
    }

    #[test]
    fn batch_replicates_gray_and_scales() {
        let d = tiny();
        let b = d.batch(&[1], DType::F64).unwrap();
        assert_eq!(b.dims(), &[1, 3, 3, 4, 4]);
        let v = ops::to_f64_vec(&b).unwrap();
        let seq = d.sequence(1);
        for f in 0..3 {
            for c in 0..3 {
                for p in 0..16 {
                    assert_eq!(v[(f * 3 + c) * 16 + p], (seq[f * 16 + p] as f32 / 255.0) as f64);
                }
            }
        }
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.safetensors");
        let d = tiny();
        d.save(&p).unwrap();
        assert_eq!(SequenceDataset::load(&p).unwrap(), d);
    }

    #[test]
    fn bad_geometry_rejected() {
        let src = DatasetSource::Directory {
            root: "x".into(),
            stride: 1,
        };
        assert!(SequenceDataset::new(src.clone(), 3, 2, (4, 4), vec![], vec![]).is_err());
        assert!(SequenceDataset::new(src, 3, 1, (4, 4), vec!["a".into()], vec![0; 10]).is_err());
        assert!(tiny().batch(&[2], DType::F32).is_err());
    }

    #[test]
    fn manifest_overlap_by_hash() {
        let d = tiny();
        let m = SplitManifest::new(0, &d.select(&[0]).unwrap(), &d.select(&[1]).unwrap());
        assert!(m.overlap().is_empty());
        let m = SplitManifest::new(0, &d, &d.select(&[1]).unwrap());
        assert_eq!(m.overlap(), vec![d.sequence_hash(1)]);
    }
}
