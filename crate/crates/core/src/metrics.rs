//! Image quality metrics and the evaluation harness.
//!
//! All metrics assume pixels in `[0, 1]` (so the peak value is 1).
//!
//! Reductions used in reports:
//! * MSE: mean over every pixel and channel of a frame, then mean over frames;
//! * SSIM: mean over valid 11x11 windows and channels of a frame, then mean over frames;
//! * PSNR: computed from the reported MSE of the same row, `10 log10(1 / mse)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::error::{dim_err, input_err, Error, Result};
use crate::network::{Mspn, RolloutMode};
use crate::ops;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MAX_PIXEL: f64 = 1.0;

/// Shape of a channel-major image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check(x: &[f64], y: &[f64], shape: ImageShape) -> Result<()> {
    if x.len() != shape.len() || y.len() != shape.len() {
        return Err(dim_err!(
            "images of {} and {} values do not match shape {shape:?}",
            x.len(),
            y.len()
        ));
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(dim_err!("cannot compare {} and {} values", x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10 log10(MAX^2 / mse)`; infinite when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (MAX_PIXEL * MAX_PIXEL / mse).log10()
    }
}

pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over one channel, keeping only fully covered windows.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).
///
/// Stability constants are `(0.01 MAX)^2` and `(0.03 MAX)^2`.
pub fn ssim(x: &[f64], y: &[f64], shape: ImageShape) -> Result<f64> {
    check(x, y, shape)?;
    let (h, w) = (shape.height, shape.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let c1 = (0.01 * MAX_PIXEL).powi(2);
    let c2 = (0.03 * MAX_PIXEL).powi(2);
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..shape.channels {
        let xs = &x[c * plane..(c + 1) * plane];
        let ys = &y[c * plane..(c + 1) * plane];
        let xx: Vec<f64> = xs.iter().map(|a| a * a).collect();
        let yy: Vec<f64> = ys.iter().map(|b| b * b).collect();
        let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
        let mx = filter_valid(xs, h, w, &win);
        let my = filter_valid(ys, h, w, &win);
        let exx = filter_valid(&xx, h, w, &win);
        let eyy = filter_valid(&yy, h, w, &win);
        let exy = filter_valid(&xy, h, w, &win);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two `(C,H,W)` tensors.
pub fn ssim_tensor(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (c, h, w) = x.dims3()?;
    if y.dims() != x.dims() {
        return Err(dim_err!("{:?} vs {:?}", x.dims(), y.dims()));
    }
    ssim(&ops::to_f64_vec(x)?, &ops::to_f64_vec(y)?, ImageShape::new(c, h, w))
}

/// External per-frame metric (for example a learned perceptual distance).
pub trait FrameMetric {
    fn name(&self) -> &str;
    fn measure(&self, prediction: &[f64], truth: &[f64], shape: ImageShape) -> Result<f64>;
}

/// Anything that extrapolates `horizon` frames from `context` frames.
pub trait Predictor {
    fn name(&self) -> String;

    /// `frames` is `(B, n, 3, H, W)` with `n >= context`; returns `horizon` tensors of shape `(B, 3, H, W)`.
    fn predict(&self, frames: &Tensor, context: usize, horizon: usize) -> Result<Vec<Tensor>>;
}

/// Repeats the last context frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyLastFrame;

impl Predictor for CopyLastFrame {
    fn name(&self) -> String {
        "copy_last_frame".into()
    }

    fn predict(&self, frames: &Tensor, context: usize, horizon: usize) -> Result<Vec<Tensor>> {
        if context == 0 {
            return Err(input_err!("copy-last-frame needs at least one context frame"));
        }
        let last = frames.narrow(1, context - 1, 1)?.squeeze(1)?;
        Ok(vec![last; horizon])
    }
}

impl Predictor for Mspn {
    fn name(&self) -> String {
        "mspn".into()
    }

    fn predict(&self, frames: &Tensor, context: usize, horizon: usize) -> Result<Vec<Tensor>> {
        let frames = frames.to_dtype(self.dtype())?;
        let out = self.rollout(&frames, context, horizon, RolloutMode::PredictedFeedback)?;
        out.outputs
            .into_iter()
            .map(|p| Ok(p.clamp(0.0, 1.0)?))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub context: usize,
    pub horizon: usize,
    pub batch_size: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            context: 10,
            horizon: 10,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based index of the predicted frame.
    pub step: usize,
    pub frames: usize,
    pub ssim: f64,
    pub mse: f64,
    /// `None` when `mse == 0` (infinite PSNR).
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub predictor: String,
    pub protocol: Protocol,
    pub sequences: usize,
    pub frames: usize,
    pub per_step: Vec<StepMetrics>,
    pub mean: StepMetrics,
    /// Identifies the model configuration and checkpoint step the report was produced from.
    pub fingerprint: String,
    pub reduction: String,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl MetricReport {
    pub fn mean_ssim(&self) -> f64 {
        self.mean.ssim
    }

    pub fn mean_mse(&self) -> f64 {
        self.mean.mse
    }

    pub fn ssim_per_step(&self) -> Vec<f64> {
        self.per_step.iter().map(|s| s.ssim).collect()
    }

    /// Line-delimited JSON: one `step` record per horizon step, then a `summary` record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.per_step {
            let mut v = serde_json::to_value(s)?;
            v["kind"] = "step".into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        let mut summary = serde_json::to_value(self)?;
        summary["kind"] = "summary".into();
        if let Some(obj) = summary.as_object_mut() {
            obj.remove("per_step");
        }
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        let mut summary = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut v: serde_json::Value = serde_json::from_str(line)?;
            let kind = v.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
            if let Some(o) = v.as_object_mut() {
                o.remove("kind");
            }
            match kind.as_str() {
                "step" => steps.push(serde_json::from_value::<StepMetrics>(v)?),
                "summary" => {
                    v["per_step"] = serde_json::Value::Array(Vec::new());
                    summary = Some(serde_json::from_value::<MetricReport>(v)?);
                }
                other => return Err(Error::Format(format!("unknown report record kind {other:?}"))),
            }
        }
        let mut report = summary.ok_or_else(|| Error::Format("report has no summary record".into()))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported report schema {}", report.schema_version)));
        }
        report.per_step = steps;
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[derive(Default)]
struct Accum {
    frames: usize,
    ssim: f64,
    mse: f64,
    external: BTreeMap<String, f64>,
}

impl Accum {
    fn finish(&self, step: usize) -> StepMetrics {
        let n = self.frames.max(1) as f64;
        let mse = self.mse / n;
        let psnr = psnr_from_mse(mse);
        StepMetrics {
            step,
            frames: self.frames,
            ssim: self.ssim / n,
            mse,
            psnr: psnr.is_finite().then_some(psnr),
            psnr_infinite: !psnr.is_finite(),
            external: self.external.iter().map(|(k, v)| (k.clone(), v / n)).collect(),
        }
    }
}

/// Runs `predictor` over every sequence of `dataset` and aggregates per-step metrics.
pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &SequenceDataset,
    protocol: Protocol,
    external: &[&dyn FrameMetric],
    fingerprint: &str,
) -> Result<MetricReport> {
    let need = protocol.context + protocol.horizon;
    if dataset.seq_len() < need {
        return Err(input_err!(
            "sequences have {} frames, protocol needs {need}",
            dataset.seq_len()
        ));
    }
    if protocol.horizon == 0 {
        return Err(input_err!("evaluation horizon must be at least 1"));
    }
    let (h, w) = dataset.frame_size();
    let shape = ImageShape::new(3, h, w);
    let mut steps: Vec<Accum> = (0..protocol.horizon).map(|_| Accum::default()).collect();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(protocol.batch_size.max(1)) {
        let batch = dataset.batch(chunk, DType::F32)?;
        let preds = predictor.predict(&batch, protocol.context, protocol.horizon)?;
        if preds.len() != protocol.horizon {
            return Err(dim_err!("predictor returned {} frames, expected {}", preds.len(), protocol.horizon));
        }
        for (k, pred) in preds.iter().enumerate() {
            let truth = batch.narrow(1, protocol.context + k, 1)?.squeeze(1)?;
            let p = ops::to_f64_vec(pred)?;
            let y = ops::to_f64_vec(&truth)?;
            if p.len() != y.len() {
                return Err(dim_err!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims()));
            }
            let acc = &mut steps[k];
            for (pf, yf) in p.chunks(shape.len()).zip(y.chunks(shape.len())) {
                acc.ssim += ssim(pf, yf, shape)?;
                acc.mse += mse(pf, yf)?;
                for m in external {
                    *acc.external.entry(m.name().to_string()).or_default() += m.measure(pf, yf, shape)?;
                }
                acc.frames += 1;
            }
        }
    }
    let per_step: Vec<StepMetrics> = steps.iter().enumerate().map(|(k, a)| a.finish(k + 1)).collect();
    let mut total = Accum::default();
    for a in &steps {
        total.frames += a.frames;
        total.ssim += a.ssim;
        total.mse += a.mse;
        for (k, v) in &a.external {
            *total.external.entry(k.clone()).or_default() += v;
        }
    }
    let mean = total.finish(0);
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        predictor: predictor.name(),
        protocol,
        sequences: dataset.len(),
        frames: mean.frames,
        per_step,
        mean,
        fingerprint: fingerprint.to_string(),
        reduction: "mse: mean over pixels and channels per frame, then over frames; \
                    ssim: mean over 11x11 gaussian windows and channels per frame, then over frames; \
                    psnr: 10*log10(1/mse) of the same row; pixels in [0,1]; predictions clamped to [0,1]"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(shape: ImageShape, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..shape.len()).map(f).collect()
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let s = ImageShape::new(3, 16, 16);
        let x = img(s, |i| ((i * 37) % 101) as f64 / 100.0);
        assert_eq!(ssim(&x, &x, s).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let s = ImageShape::new(1, 16, 16);
        let (a, b) = (0.3, 0.7);
        let c1 = 1e-4;
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&vec![a; s.len()], &vec![b; s.len()], s).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        let s = ImageShape::new(1, 8, 8);
        assert!(ssim(&vec![0.0; 64], &vec![0.0; 64], s).is_err());
        let s = ImageShape::new(1, 16, 16);
        assert!(ssim(&vec![0.0; 256], &vec![0.0; 255], s).is_err());
    }

    #[test]
    fn psnr_hand_values() {
        let x = vec![0.5; 100];
        let y = vec![0.6; 100];
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let z = vec![0.7; 100];
        let drop = psnr(&x, &y).unwrap() - psnr(&x, &z).unwrap();
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn report_roundtrip_and_psnr_consistency() {
        let r = MetricReport {
            schema_version: REPORT_SCHEMA_VERSION,
            predictor: "x".into(),
            protocol: Protocol::default(),
            sequences: 2,
            frames: 4,
            per_step: vec![
                Accum { frames: 2, ssim: 1.8, mse: 0.02, external: BTreeMap::new() }.finish(1),
                Accum { frames: 2, ssim: 2.0, mse: 0.0, external: BTreeMap::new() }.finish(2),
            ],
            mean: Accum { frames: 4, ssim: 3.8, mse: 0.02, external: BTreeMap::new() }.finish(0),
            fingerprint: "abc".into(),
            reduction: "r".into(),
        };
        let back = MetricReport::from_jsonl(&r.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(back.per_step[1].psnr_infinite);
        let s = &back.per_step[0];
        assert!((psnr_from_mse(s.mse) - s.psnr.unwrap()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..500) {
            let s = ImageShape::new(3, 12, 13);
            let x = img(s, |i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 999.0);
            let y = img(s, |i| (((i as u64 * 7 + seed) * 40503) % 1000) as f64 / 999.0);
            let a = ssim(&x, &y, s).unwrap();
            let b = ssim(&y, &x, s).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
