//! The multi-level network and its per-timestep schedule.
//!
//! Each timestep `t` runs two passes:
//!
//! * top-down, `l = L-1 ... 0`: the level-`l` cell consumes its own previous
//!   error `E[t-1][l]`, the lower level's previous error `E[t-1][l-1]`
//!   (pooled to level `l`, absent at `l = 0`), the prediction of the level
//!   above `P[t][l+1]` (2x nearest upsampled, absent at the top) and the fused
//!   semantic code `v[t][l+1]`, and emits `P[t][l]` and `v[t][l]`;
//! * bottom-up: the frame, or the model's own level-0 prediction when running
//!   on predicted feedback, is turned into a pyramid and every level's error
//!   map is recomputed against it.
//!
//! With `sensory_input` enabled every cell additionally sees the pyramid level
//! of the frame consumed by the previous bottom-up pass.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::cell::{CellConfig, CellInputs, CellState, CodecNorm, EdLstmCell, SemanticCode};
use crate::error::{contract_err, dim_err, input_err, Result};
use crate::ops;
use crate::params::ParamSource;
use crate::pyramid::{self, build_pyramid, compute_error, Downsample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub base_channels: usize,
    pub sensory_input: bool,
    pub downsample: Downsample,
    pub forget_bias: f64,
    pub codec_norm: CodecNorm,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            height: 64,
            width: 64,
            hidden: 64,
            base_channels: 16,
            sensory_input: true,
            downsample: Downsample::AvgPool,
            forget_bias: 1.0,
            codec_norm: CodecNorm::None,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(input_err!("network needs at least one level"));
        }
        if self.hidden == 0 || self.base_channels == 0 {
            return Err(input_err!("hidden and base_channels must be positive"));
        }
        // every level's encoder halves down to the shared code resolution H / 2^L
        let div = 1usize << self.levels;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(dim_err!(
                "frame size {}x{} must be divisible by 2^levels = {div}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    pub fn level_size(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn has_lower(&self, level: usize) -> bool {
        level > 0
    }

    pub fn has_higher(&self, level: usize) -> bool {
        level + 1 < self.levels
    }

    pub fn input_channels(&self, level: usize) -> usize {
        let mut c = 6;
        if self.has_lower(level) {
            c += 6;
        }
        if self.has_higher(level) {
            c += 3;
        }
        if self.sensory_input {
            c += 3;
        }
        c
    }

    fn cell_config(&self, level: usize) -> CellConfig {
        CellConfig {
            level,
            levels: self.levels,
            hidden: self.hidden,
            base_channels: self.base_channels,
            input_channels: self.input_channels(level),
            fuse_higher: self.has_higher(level),
            forget_bias: self.forget_bias,
            norm: self.codec_norm,
        }
    }
}

/// Whether frames past the context window come from the data or from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    TeacherForced,
    PredictedFeedback,
}

/// One routed input of a cell step, tagged with where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routed {
    /// `E[t][level]`; `t` is `None` for the zero initialization.
    LocalError { level: usize, t: Option<usize> },
    LowerError { level: usize, t: Option<usize> },
    HigherPrediction { level: usize, t: usize },
    HigherCode { level: usize, t: usize },
    Sensory { level: usize, t: Option<usize> },
}

/// Record of one cell invocation, captured when tracing is enabled.
#[derive(Debug, Clone)]
pub struct TraceEvent {
    pub t: usize,
    pub level: usize,
    pub routed: Vec<Routed>,
    /// Channel-stacked input maps as fed to the cell (hidden state excluded).
    pub stack: Tensor,
    /// Higher-level code handed to the cell for fusion.
    pub higher_code: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LevelState {
    pub cell: CellState,
    pub error: Tensor,
    /// Timestep whose bottom-up pass produced `error`.
    pub error_t: Option<usize>,
    pub prediction: Option<Tensor>,
    pub code: Option<SemanticCode>,
    /// Pyramid level of the frame consumed by the last bottom-up pass.
    pub frame: Tensor,
    pub frame_t: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cursor {
    TopDown(usize),
    BottomUp,
}

#[derive(Debug, Clone)]
pub struct NetworkState {
    levels: Vec<LevelState>,
    t: usize,
    mode: RolloutMode,
    cursor: Cursor,
    trace: Option<Vec<TraceEvent>>,
}

impl NetworkState {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn mode(&self) -> RolloutMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: RolloutMode) {
        self.mode = mode;
    }

    pub fn level(&self, l: usize) -> &LevelState {
        &self.levels[l]
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Output of [`Mspn::rollout`].
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Level-0 predictions of the last `horizon` steps, each `(B,3,H,W)`.
    pub outputs: Vec<Tensor>,
    /// `predictions[t][l]` for every executed step.
    pub predictions: Vec<Vec<Tensor>>,
    /// Whether step `t`'s bottom-up pass consumed the model's own prediction.
    pub fed_back: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Mspn {
    cfg: NetworkConfig,
    cells: Vec<EdLstmCell>,
    dtype: DType,
}

impl Mspn {
    pub fn new(cfg: NetworkConfig, src: &mut impl ParamSource) -> Result<Self> {
        cfg.validate()?;
        let cells = (0..cfg.levels)
            .map(|l| EdLstmCell::new(cfg.cell_config(l), src))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dtype: src.dtype(),
            cfg,
            cells,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn cell(&self, level: usize) -> &EdLstmCell {
        &self.cells[level]
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Fresh state: zero memories, zero errors, zero sensory frames.
    pub fn init_state(&self, batch: usize, mode: RolloutMode) -> Result<NetworkState> {
        let mut levels = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            let (h, w) = self.cfg.level_size(l);
            levels.push(LevelState {
                cell: CellState::zeros(batch, self.cfg.hidden, h, w, self.dtype)?,
                error: Tensor::zeros((batch, 6, h, w), self.dtype, &Device::Cpu)?,
                error_t: None,
                prediction: None,
                code: None,
                frame: Tensor::zeros((batch, 3, h, w), self.dtype, &Device::Cpu)?,
                frame_t: None,
            });
        }
        Ok(NetworkState {
            levels,
            t: 0,
            mode,
            cursor: Cursor::TopDown(self.cfg.levels - 1),
            trace: None,
        })
    }

    /// Runs the cell of one level. Levels must be stepped strictly from the top down.
    pub fn step_level(&self, state: &mut NetworkState, level: usize) -> Result<()> {
        if state.levels.len() != self.cfg.levels {
            return Err(contract_err!(
                "state has {} levels, network has {}",
                state.levels.len(),
                self.cfg.levels
            ));
        }
        if state.cursor != Cursor::TopDown(level) {
            return Err(contract_err!(
                "level {level} stepped out of order at t={} (expected {:?})",
                state.t,
                state.cursor
            ));
        }
        let t = state.t;
        let expected_prev = t.checked_sub(1);
        let (h, w) = self.cfg.level_size(level);

        let mut routed = Vec::with_capacity(5);
        let local = &state.levels[level];
        if local.error_t != expected_prev {
            return Err(contract_err!(
                "stale error map at level {level}: from t={:?}, expected {:?}",
                local.error_t,
                expected_prev
            ));
        }
        routed.push(Routed::LocalError {
            level,
            t: local.error_t,
        });

        let lower_error = if self.cfg.has_lower(level) {
            let lower = &state.levels[level - 1];
            if lower.error_t != expected_prev {
                return Err(contract_err!("stale error map at level {}", level - 1));
            }
            routed.push(Routed::LowerError {
                level: level - 1,
                t: lower.error_t,
            });
            Some(self.cfg.downsample.apply(&lower.error)?)
        } else {
            None
        };

        let (higher_prediction, higher_code) = if self.cfg.has_higher(level) {
            let upper = &state.levels[level + 1];
            let (Some(p), Some(v)) = (&upper.prediction, &upper.code) else {
                return Err(contract_err!("level {} has not produced its prediction for t={t}", level + 1));
            };
            routed.push(Routed::HigherPrediction { level: level + 1, t });
            routed.push(Routed::HigherCode { level: level + 1, t });
            (Some(ops::upsample2(p)?), Some(v.clone()))
        } else {
            (None, None)
        };

        let sensory = if self.cfg.sensory_input {
            routed.push(Routed::Sensory {
                level,
                t: local.frame_t,
            });
            Some(&local.frame)
        } else {
            None
        };

        let inputs = CellInputs {
            local_error: Some(&local.error),
            lower_error: lower_error.as_ref(),
            higher_prediction: higher_prediction.as_ref(),
            sensory,
        };
        for m in inputs.maps() {
            let (_, _, mh, mw) = m.dims4()?;
            if (mh, mw) != (h, w) {
                return Err(dim_err!("level {level} input is {mh}x{mw}, expected {h}x{w}"));
            }
        }
        let stack = inputs.stack()?;
        let (gates, code) = self.cells[level].codec(&stack, &local.cell, higher_code.as_ref())?;
        let cell_state = gates.apply(&local.cell.c)?;
        let prediction = self.cells[level].project(&cell_state.h)?;

        if let Some(trace) = state.trace.as_mut() {
            trace.push(TraceEvent {
                t,
                level,
                routed,
                stack: stack.detach(),
                higher_code: higher_code.map(|c| c.0.detach()),
            });
        }
        let ls = &mut state.levels[level];
        ls.cell = cell_state;
        ls.prediction = Some(prediction);
        ls.code = Some(code);
        state.cursor = if level == 0 {
            Cursor::BottomUp
        } else {
            Cursor::TopDown(level - 1)
        };
        Ok(())
    }

    /// Top-down pass of the current timestep; returns `P[t][l]` for all levels.
    pub fn step_top_down(&self, state: &mut NetworkState) -> Result<Vec<Tensor>> {
        for level in (0..self.cfg.levels).rev() {
            self.step_level(state, level)?;
        }
        Ok(state
            .levels
            .iter()
            .map(|l| l.prediction.clone().expect("every level just stepped"))
            .collect())
    }

    /// Bottom-up pass: rebuilds every level's error map and advances `t`.
    ///
    /// With `frame = None` the pyramid is built from the model's own level-0
    /// prediction clamped to `[0, 1]`, which is what predicted-feedback rollouts
    /// use past the context window.
    pub fn step_bottom_up(&self, state: &mut NetworkState, frame: Option<&Tensor>) -> Result<()> {
        if state.cursor != Cursor::BottomUp {
            return Err(contract_err!(
                "bottom-up pass at t={} before all levels produced predictions",
                state.t
            ));
        }
        let source = match frame {
            Some(f) => {
                let (b, c, h, w) = f.dims4()?;
                let batch = state.levels[0].error.dim(0)?;
                if (b, c, h, w) != (batch, 3, self.cfg.height, self.cfg.width) {
                    return Err(dim_err!(
                        "frame {:?} does not match ({batch}, 3, {}, {})",
                        f.dims(),
                        self.cfg.height,
                        self.cfg.width
                    ));
                }
                f.to_dtype(self.dtype)?
            }
            // fed back as a frame, so held to the pixel range
            None => state.levels[0]
                .prediction
                .as_ref()
                .ok_or_else(|| contract_err!("no level-0 prediction to feed back"))?
                .clamp(0.0, 1.0)?,
        };
        let targets = build_pyramid(&source, self.cfg.levels, self.cfg.downsample)?;
        let t = state.t;
        for (l, target) in targets.into_levels().into_iter().enumerate() {
            let ls = &mut state.levels[l];
            let p = ls
                .prediction
                .as_ref()
                .ok_or_else(|| contract_err!("missing prediction at level {l}"))?;
            ls.error = compute_error(&target, p)?.into_tensor();
            ls.error_t = Some(t);
            ls.frame = target;
            ls.frame_t = Some(t);
        }
        state.t += 1;
        state.cursor = Cursor::TopDown(self.cfg.levels - 1);
        Ok(())
    }

    /// Unrolls `context + horizon` steps over `frames` (`(B,n,3,H,W)` or `(n,3,H,W)`).
    ///
    /// Steps `t < context` always consume ground truth. Later steps consume
    /// ground truth in teacher-forced mode and the model's own level-0
    /// prediction in predicted-feedback mode.
    pub fn rollout(&self, frames: &Tensor, context: usize, horizon: usize, mode: RolloutMode) -> Result<Rollout> {
        let frames = match frames.rank() {
            4 => frames.unsqueeze(0)?,
            5 => frames.clone(),
            r => return Err(dim_err!("expected (B,n,3,H,W) frames, got rank {r}")),
        };
        let (batch, n, _, _, _) = frames.dims5()?;
        if n < context {
            return Err(input_err!("{n} frames cannot cover a context of {context}"));
        }
        let steps = context + horizon;
        if mode == RolloutMode::TeacherForced && steps > n {
            return Err(input_err!(
                "teacher-forced rollout of {steps} steps needs {steps} frames, got {n}"
            ));
        }
        let mut state = self.init_state(batch, mode)?;
        let mut predictions = Vec::with_capacity(steps);
        let mut fed_back = Vec::with_capacity(steps);
        for t in 0..steps {
            let preds = self.step_top_down(&mut state)?;
            let feedback = mode == RolloutMode::PredictedFeedback && t >= context;
            if feedback {
                self.step_bottom_up(&mut state, None)?;
            } else {
                let frame = frames.narrow(1, t, 1)?.squeeze(1)?;
                self.step_bottom_up(&mut state, Some(&frame))?;
            }
            predictions.push(preds);
            fed_back.push(feedback);
        }
        let outputs = predictions[context..].iter().map(|p| p[0].clone()).collect();
        Ok(Rollout {
            outputs,
            predictions,
            fed_back,
        })
    }

    /// Ground-truth pyramids for the first `steps` frames of a `(B,n,3,H,W)` batch.
    pub fn target_pyramids(&self, frames: &Tensor, steps: usize) -> Result<Vec<Vec<Tensor>>> {
        let frames = frames.to_dtype(self.dtype)?;
        let n = frames.dim(1)?;
        if steps > n {
            return Err(input_err!("need {steps} ground-truth frames, got {n}"));
        }
        (0..steps)
            .map(|t| {
                let f = frames.narrow(1, t, 1)?.squeeze(1)?;
                Ok(pyramid::build_pyramid(&f, self.cfg.levels, self.cfg.downsample)?.into_levels())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamInit, ParamStore};

    fn tiny(levels: usize, sensory: bool) -> NetworkConfig {
        NetworkConfig {
            levels,
            height: 16,
            width: 16,
            hidden: 4,
            base_channels: 4,
            sensory_input: sensory,
            ..Default::default()
        }
    }

    fn net(cfg: NetworkConfig, seed: u64) -> Mspn {
        let mut store = ParamStore::new(DType::F64);
        Mspn::new(cfg, &mut ParamInit::new(&mut store, seed)).unwrap()
    }

    fn frames(batch: usize, n: usize) -> Tensor {
        Tensor::rand(0f64, 1.0, (batch, n, 3, 16, 16), &Device::Cpu).unwrap()
    }

    #[test]
    fn single_level_cell_sees_only_local_error() {
        let m = net(tiny(1, false), 1);
        let mut s = m.init_state(1, RolloutMode::TeacherForced).unwrap();
        s.enable_trace();
        m.step_top_down(&mut s).unwrap();
        assert_eq!(s.trace()[0].routed, vec![Routed::LocalError { level: 0, t: None }]);
        assert_eq!(s.trace()[0].stack.dims(), &[1, 6, 16, 16]);
    }

    #[test]
    fn out_of_order_level_is_rejected() {
        let m = net(tiny(3, true), 1);
        let mut s = m.init_state(1, RolloutMode::TeacherForced).unwrap();
        assert!(matches!(m.step_level(&mut s, 0), Err(crate::Error::Contract(_))));
        m.step_level(&mut s, 2).unwrap();
        assert!(matches!(m.step_level(&mut s, 0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn bottom_up_requires_predictions() {
        let m = net(tiny(2, true), 1);
        let mut s = m.init_state(1, RolloutMode::TeacherForced).unwrap();
        let f = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(m.step_bottom_up(&mut s, Some(&f)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn zero_error_when_frame_equals_predictions() {
        let m = net(tiny(1, true), 2);
        let mut s = m.init_state(2, RolloutMode::TeacherForced).unwrap();
        let p = m.step_top_down(&mut s).unwrap();
        m.step_bottom_up(&mut s, Some(&p[0])).unwrap();
        assert!(ops::to_f64_vec(&s.level(0).error).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(s.t(), 1);
    }

    #[test]
    fn feedback_targets_are_pooled_level_zero_prediction() {
        let m = net(tiny(3, true), 4);
        let mut s = m.init_state(1, RolloutMode::PredictedFeedback).unwrap();
        let p = m.step_top_down(&mut s).unwrap();
        m.step_bottom_up(&mut s, None).unwrap();
        let pyr = build_pyramid(&p[0].clamp(0.0, 1.0).unwrap(), 3, Downsample::AvgPool).unwrap();
        for (l, pl) in p.iter().enumerate() {
            let want = compute_error(pyr.level(l), pl).unwrap();
            assert_eq!(
                ops::to_f64_vec(&s.level(l).error).unwrap(),
                ops::to_f64_vec(want.tensor()).unwrap()
            );
            assert_eq!(
                ops::to_f64_vec(&s.level(l).frame).unwrap(),
                ops::to_f64_vec(pyr.level(l)).unwrap()
            );
        }
        // level 0 compares the prediction with itself
        assert!(ops::to_f64_vec(&s.level(0).error).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rollout_shapes_and_feedback_flags() {
        let m = net(tiny(3, true), 5);
        let f = frames(2, 4);
        let r = m.rollout(&f, 2, 3, RolloutMode::PredictedFeedback).unwrap();
        assert_eq!(r.outputs.len(), 3);
        assert_eq!(r.predictions.len(), 5);
        assert_eq!(r.fed_back, vec![false, false, true, true, true]);
        for step in &r.predictions {
            for (l, p) in step.iter().enumerate() {
                assert_eq!(p.dims(), &[2, 3, 16 >> l, 16 >> l]);
            }
        }
        let empty = m.rollout(&f, 2, 0, RolloutMode::PredictedFeedback).unwrap();
        assert!(empty.outputs.is_empty());
        assert_eq!(empty.predictions.len(), 2);
    }

    #[test]
    fn teacher_forced_needs_enough_frames() {
        let m = net(tiny(2, true), 5);
        let f = frames(1, 4);
        assert!(matches!(
            m.rollout(&f, 2, 3, RolloutMode::TeacherForced),
            Err(crate::Error::Input(_))
        ));
        assert!(m.rollout(&f, 2, 2, RolloutMode::TeacherForced).is_ok());
    }

    #[test]
    fn frame_size_must_divide_code_resolution() {
        let cfg = NetworkConfig {
            height: 20,
            ..tiny(3, true)
        };
        assert!(cfg.validate().is_err());
    }
}
