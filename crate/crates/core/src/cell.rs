//! Encoder-decoder LSTM cell.
//!
//! A level-`l` cell in an `L`-level network concatenates its input maps with
//! the previous hidden state and runs them through a U-shaped codec with
//! `L - l` stride-2 encoder stages. The encoder output (the semantic code) has
//! the same spatial size at every level, so the code of the level above can be
//! fused into it. The decoder mirrors the encoder with skip connections and
//! emits `4 * hidden` channels which are split into the forget, input and
//! output gates and the candidate memory. The RGB prediction is a 3x3
//! convolution of the new hidden state.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::ops;
use crate::params::{Conv2d, ConvSpec, Init, ParamSource};

/// Normalization applied after each encoder convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecNorm {
    #[default]
    None,
    /// Per-sample, per-channel standardization over the spatial axes.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub level: usize,
    pub levels: usize,
    pub hidden: usize,
    /// Width of the first encoder stage; stage `k` has `base << k` channels.
    pub base_channels: usize,
    /// Channels of the concatenated input maps, hidden state excluded.
    pub input_channels: usize,
    /// Whether a higher-level semantic code is fused into this cell's code.
    pub fuse_higher: bool,
    pub forget_bias: f64,
    pub norm: CodecNorm,
}

impl CellConfig {
    pub fn encoder_stages(&self) -> usize {
        self.levels - self.level
    }

    /// Channel depth of the semantic code. Halves with each level upwards.
    pub fn code_channels(&self) -> usize {
        self.base_channels << (self.encoder_stages() - 1)
    }

    fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }
}

/// Recurrent state of one cell.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(batch: usize, hidden: usize, height: usize, width: usize, dtype: DType) -> Result<Self> {
        let h = Tensor::zeros((batch, hidden, height, width), dtype, &Device::Cpu)?;
        Ok(Self { c: h.clone(), h })
    }

    fn check(&self, hidden: usize, height: usize, width: usize) -> Result<()> {
        let (_, ch, sh, sw) = self
            .h
            .dims4()
            .map_err(|_| contract_err!("cell state is not a (B,C,H,W) map"))?;
        if self.h.dims() != self.c.dims() {
            return Err(contract_err!(
                "hidden {:?} and memory {:?} disagree",
                self.h.dims(),
                self.c.dims()
            ));
        }
        if ch != hidden || sh != height || sw != width {
            return Err(contract_err!(
                "cell state {:?} was not initialized for {hidden} channels at {height}x{width}",
                self.h.dims()
            ));
        }
        Ok(())
    }
}

/// Gate pre-activations split from the codec output.
#[derive(Debug, Clone)]
pub struct GateBundle {
    pub forget: Tensor,
    pub input: Tensor,
    pub output: Tensor,
    pub candidate: Tensor,
}

impl GateBundle {
    pub fn split(codec_out: &Tensor, hidden: usize) -> Result<Self> {
        let (_, c, _, _) = codec_out.dims4()?;
        if c != 4 * hidden {
            return Err(dim_err!("codec produced {c} channels, expected {}", 4 * hidden));
        }
        let mut parts = codec_out.chunk(4, 1)?.into_iter();
        let mut next = || parts.next().expect("four chunks");
        Ok(Self {
            forget: next(),
            input: next(),
            output: next(),
            candidate: next(),
        })
    }

    /// Activates the gates and advances the memory:
    /// `c = f*c_prev + i*tanh(g)`, `h = o*tanh(c)` with `f, i, o` passed through a sigmoid.
    pub fn apply(&self, prev_c: &Tensor) -> Result<CellState> {
        let f = ops::sigmoid(&self.forget)?;
        let i = ops::sigmoid(&self.input)?;
        let o = ops::sigmoid(&self.output)?;
        let g = self.candidate.tanh()?;
        let c = ((f * prev_c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(CellState { h, c })
    }
}

/// Bottleneck features of a cell's encoder.
#[derive(Debug, Clone)]
pub struct SemanticCode(pub Tensor);

impl SemanticCode {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Input maps of one cell step, all at the cell's resolution.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellInputs<'a> {
    pub local_error: Option<&'a Tensor>,
    pub lower_error: Option<&'a Tensor>,
    pub higher_prediction: Option<&'a Tensor>,
    pub sensory: Option<&'a Tensor>,
}

impl<'a> CellInputs<'a> {
    pub fn maps(&self) -> impl Iterator<Item = &'a Tensor> {
        [self.local_error, self.lower_error, self.higher_prediction, self.sensory]
            .into_iter()
            .flatten()
    }

    /// The maps concatenated along the channel axis.
    pub fn stack(&self) -> Result<Tensor> {
        let maps: Vec<&Tensor> = self.maps().collect();
        if maps.is_empty() {
            return Err(contract_err!("a cell needs at least one input map"));
        }
        let (b, _, h, w) = maps[0].dims4()?;
        for m in &maps {
            let (mb, _, mh, mw) = m.dims4()?;
            if (mb, mh, mw) != (b, h, w) {
                return Err(dim_err!(
                    "input map {:?} does not match batch {b} at {h}x{w}",
                    m.dims()
                ));
            }
        }
        Ok(Tensor::cat(&maps, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub prediction: Tensor,
    pub state: CellState,
    pub code: SemanticCode,
}

#[derive(Debug, Clone)]
pub struct EdLstmCell {
    cfg: CellConfig,
    encoder: Vec<Conv2d>,
    /// `decoder[j]` maps stage `j + 2` features (plus the stage `j + 1` skip) to stage `j + 1` width.
    decoder: Vec<Conv2d>,
    gates: Conv2d,
    projection: Conv2d,
    fusion: Option<Conv2d>,
}

impl EdLstmCell {
    pub fn new(cfg: CellConfig, src: &mut impl ParamSource) -> Result<Self> {
        if cfg.level >= cfg.levels {
            return Err(contract_err!("level {} out of range for {} levels", cfg.level, cfg.levels));
        }
        if cfg.hidden == 0 || cfg.base_channels == 0 {
            return Err(contract_err!("hidden and base channel counts must be positive"));
        }
        let prefix = format!("level{}", cfg.level);
        let stages = cfg.encoder_stages();
        let x_channels = cfg.input_channels + cfg.hidden;

        let mut encoder = Vec::with_capacity(stages);
        let mut cin = x_channels;
        for k in 0..stages {
            let cout = cfg.stage_channels(k);
            encoder.push(src.conv(&format!("{prefix}.enc{k}"), ConvSpec::k3(cin, cout).stride(2))?);
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(stages.saturating_sub(1));
        for k in 0..stages.saturating_sub(1) {
            let deep = cfg.stage_channels(k + 1);
            let skip = cfg.stage_channels(k);
            decoder.push(src.conv(&format!("{prefix}.dec{k}"), ConvSpec::k3(deep + skip, skip))?);
        }
        let gates = src.conv_with_bias(
            &format!("{prefix}.gates"),
            ConvSpec::k3(cfg.stage_channels(0) + x_channels, 4 * cfg.hidden),
            Init::Leading {
                count: cfg.hidden,
                value: cfg.forget_bias,
            },
        )?;
        let projection = src.conv(&format!("{prefix}.proj"), ConvSpec::k3(cfg.hidden, 3))?;
        let fusion = if cfg.fuse_higher {
            let local = cfg.code_channels();
            Some(src.conv(&format!("{prefix}.fuse"), ConvSpec::k3(local + local / 2, local))?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            encoder,
            decoder,
            gates,
            projection,
            fusion,
        })
    }

    pub fn config(&self) -> &CellConfig {
        &self.cfg
    }

    fn normalize(&self, x: Tensor) -> Result<Tensor> {
        match self.cfg.norm {
            CodecNorm::None => Ok(x),
            CodecNorm::Instance => {
                let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
                Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
            }
        }
    }

    /// Fuses the code of the level above into this cell's code.
    ///
    /// Without a higher code this is the identity.
    pub fn fuse_codes(&self, local: &SemanticCode, higher: Option<&SemanticCode>) -> Result<SemanticCode> {
        let Some(higher) = higher else {
            return Ok(local.clone());
        };
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| contract_err!("level {} has no higher level to fuse", self.cfg.level))?;
        let (lb, _, lh, lw) = local.0.dims4()?;
        let (hb, _, hh, hw) = higher.0.dims4()?;
        if (lb, lh, lw) != (hb, hh, hw) {
            return Err(dim_err!(
                "local code {:?} and higher code {:?} differ in spatial size",
                local.0.dims(),
                higher.0.dims()
            ));
        }
        let mixed = fusion.forward(&Tensor::cat(&[&local.0, &higher.0], 1)?)?;
        Ok(SemanticCode(mixed.relu()?))
    }

    /// Runs the codec and returns the gate pre-activations together with the fused code.
    pub fn codec(&self, x: &Tensor, state: &CellState, higher: Option<&SemanticCode>) -> Result<(GateBundle, SemanticCode)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.input_channels {
            return Err(dim_err!(
                "level {} cell expects {} input channels, got {c}",
                self.cfg.level,
                self.cfg.input_channels
            ));
        }
        state.check(self.cfg.hidden, h, w)?;
        if self.cfg.fuse_higher != higher.is_some() {
            return Err(contract_err!(
                "level {} cell {} a higher semantic code",
                self.cfg.level,
                if self.cfg.fuse_higher { "requires" } else { "does not take" }
            ));
        }
        let x0 = Tensor::cat(&[x, &state.h], 1)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut e = x0.clone();
        for conv in &self.encoder {
            e = self.normalize(conv.forward(&e)?)?.relu()?;
            skips.push(e.clone());
        }
        let code = self.fuse_codes(&SemanticCode(e), higher)?;

        let mut d = code.0.clone();
        for (k, conv) in self.decoder.iter().enumerate().rev() {
            let up = ops::upsample2(&d)?;
            d = conv.forward(&Tensor::cat(&[&up, &skips[k]], 1)?)?.relu()?;
        }
        let up = ops::upsample2(&d)?;
        let out = self.gates.forward(&Tensor::cat(&[&up, &x0], 1)?)?;
        Ok((GateBundle::split(&out, self.cfg.hidden)?, code))
    }

    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        self.projection.forward(h)
    }

    pub fn step(&self, inputs: &CellInputs<'_>, state: &CellState, higher: Option<&SemanticCode>) -> Result<CellOutput> {
        let x = inputs.stack()?;
        let (gates, code) = self.codec(&x, state, higher)?;
        let state = gates.apply(&state.c)?;
        if cfg!(debug_assertions) {
            let finite = ops::to_f64_vec(&state.c)?.iter().all(|v| v.is_finite());
            debug_assert!(finite, "non-finite cell memory at level {}", self.cfg.level);
        }
        let prediction = self.project(&state.h)?;
        Ok(CellOutput {
            prediction,
            state,
            code,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamInit, ParamStore};

    fn cfg(level: usize, levels: usize) -> CellConfig {
        CellConfig {
            level,
            levels,
            hidden: 4,
            base_channels: 4,
            input_channels: 6,
            fuse_higher: level + 1 < levels,
            forget_bias: 1.0,
            norm: CodecNorm::None,
        }
    }

    fn build(cfg: CellConfig, seed: u64) -> (ParamStore, EdLstmCell) {
        let mut store = ParamStore::new(DType::F64);
        let cell = EdLstmCell::new(cfg, &mut ParamInit::new(&mut store, seed)).unwrap();
        (store, cell)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_everything_gives_zero_prediction() {
        let (store, _) = build(cfg(0, 1), 3);
        // zero all weights: every pre-activation is zero except the forget offset
        let mut zeroed = ParamStore::new(DType::F64);
        for (k, v) in store.iter() {
            zeroed.insert(k.clone(), &v.zeros_like().unwrap()).unwrap();
        }
        let cell = EdLstmCell::new(cfg(0, 1), &mut zeroed.view(true)).unwrap();
        let e = Tensor::zeros((1, 6, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let state = CellState::zeros(1, 4, 8, 8, DType::F64).unwrap();
        let out = cell
            .step(&CellInputs { local_error: Some(&e), ..Default::default() }, &state, None)
            .unwrap();
        assert!(ops::to_f64_vec(&out.state.h).unwrap().iter().all(|&v| v == 0.0));
        assert!(ops::to_f64_vec(&out.prediction).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_follow_closed_form() {
        let (store, _) = build(cfg(0, 1), 3);
        let hidden = 4;
        let big = 30.0;
        let cand = [0.3, -1.2, 2.0, 0.0];
        let mut inj = ParamStore::new(DType::F64);
        for (k, v) in store.iter() {
            let t = if k == "level0.gates.bias" {
                let mut b = vec![big; 3 * hidden];
                b.extend_from_slice(&cand);
                Tensor::from_vec(b, 4 * hidden, &Device::Cpu).unwrap()
            } else {
                v.zeros_like().unwrap()
            };
            inj.insert(k.clone(), &t).unwrap();
        }
        let cell = EdLstmCell::new(cfg(0, 1), &mut inj.view(true)).unwrap();
        let e = randn(&[1, 6, 8, 8], 1);
        let c_prev = randn(&[1, 4, 8, 8], 2);
        let state = CellState {
            h: randn(&[1, 4, 8, 8], 3),
            c: c_prev.clone(),
        };
        let out = cell
            .step(&CellInputs { local_error: Some(&e), ..Default::default() }, &state, None)
            .unwrap();
        let s = 1.0 / (1.0 + f64::exp(-big));
        let prev = ops::to_f64_vec(&c_prev).unwrap();
        let got = ops::to_f64_vec(&out.state.c).unwrap();
        for (idx, (g, p)) in got.iter().zip(&prev).enumerate() {
            let ch = idx / 64;
            let want = s * p + s * f64::tanh(cand[ch]);
            assert!((g - want).abs() < 1e-12, "{g} vs {want}");
            assert!((g - (p + f64::tanh(cand[ch]))).abs() < 1e-11);
        }
    }

    #[test]
    fn gate_ranges_and_memory_bound() {
        let (_, cell) = build(cfg(0, 2), 9);
        let x = randn(&[2, 6, 8, 8], 4).affine(5.0, 0.0).unwrap();
        let state = CellState {
            h: randn(&[2, 4, 8, 8], 5),
            c: randn(&[2, 4, 8, 8], 6).affine(3.0, 0.0).unwrap(),
        };
        let higher = SemanticCode(randn(&[2, 4, 2, 2], 7));
        let (gates, _) = cell.codec(&x, &state, Some(&higher)).unwrap();
        for g in [&gates.forget, &gates.input, &gates.output] {
            let a = ops::to_f64_vec(&ops::sigmoid(g).unwrap()).unwrap();
            assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let cand = ops::to_f64_vec(&gates.candidate.tanh().unwrap()).unwrap();
        assert!(cand.iter().all(|&v| v > -1.0 && v < 1.0));
        let next = gates.apply(&state.c).unwrap();
        let prev = ops::to_f64_vec(&state.c).unwrap();
        for (n, p) in ops::to_f64_vec(&next.c).unwrap().iter().zip(&prev) {
            assert!(n.abs() <= p.abs() + 1.0);
        }
    }

    #[test]
    fn fusion_identity_without_higher_code() {
        let (_, cell) = build(cfg(1, 2), 1);
        let v = SemanticCode(randn(&[1, 4, 2, 2], 1));
        let out = cell.fuse_codes(&v, None).unwrap();
        assert_eq!(ops::to_f64_vec(&out.0).unwrap(), ops::to_f64_vec(&v.0).unwrap());
    }

    #[test]
    fn fusion_select_local_weights() {
        let (store, _) = build(cfg(0, 2), 1);
        // code depth at level 0 of 2 levels: 4 << 1 = 8, higher depth 4
        let local_depth = 8;
        let mut inj = ParamStore::new(DType::F64);
        for (k, v) in store.iter() {
            let t = if k == "level0.fuse.weight" {
                let mut w = vec![0.0; local_depth * (local_depth + 4) * 9];
                for o in 0..local_depth {
                    // center tap of the matching local input channel
                    w[(o * (local_depth + 4) + o) * 9 + 4] = 1.0;
                }
                Tensor::from_vec(w, v.dims(), &Device::Cpu).unwrap()
            } else {
                v.as_tensor().clone()
            };
            inj.insert(k.clone(), &t).unwrap();
        }
        let cell = EdLstmCell::new(cfg(0, 2), &mut inj.view(true)).unwrap();
        let local = SemanticCode(randn(&[2, 8, 2, 2], 1).relu().unwrap());
        let higher = SemanticCode(randn(&[2, 4, 2, 2], 2));
        let out = cell.fuse_codes(&local, Some(&higher)).unwrap();
        assert_eq!(ops::to_f64_vec(&out.0).unwrap(), ops::to_f64_vec(&local.0).unwrap());
    }

    #[test]
    fn fusion_shape_and_spatial_mismatch() {
        let (_, cell) = build(cfg(0, 3), 1);
        let local = SemanticCode(randn(&[1, 16, 2, 2], 1));
        let higher = SemanticCode(randn(&[1, 8, 2, 2], 2));
        assert_eq!(cell.fuse_codes(&local, Some(&higher)).unwrap().0.dims(), &[1, 16, 2, 2]);
        let bad = SemanticCode(randn(&[1, 8, 4, 4], 2));
        assert!(matches!(cell.fuse_codes(&local, Some(&bad)), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn code_resolution_is_shared_across_levels() {
        for level in 0..3 {
            let (_, cell) = build(cfg(level, 3), 1);
            let side = 16 >> level;
            let x = randn(&[1, 6, side, side], 1);
            let st = CellState::zeros(1, 4, side, side, DType::F64).unwrap();
            let higher = (level < 2).then(|| SemanticCode(randn(&[1, 4 << (1 - level), 2, 2], 3)));
            let (_, code) = cell.codec(&x, &st, higher.as_ref()).unwrap();
            assert_eq!(code.0.dims(), &[1, 4 << (2 - level), 2, 2]);
        }
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (_, cell) = build(cfg(0, 1), 1);
        let a = randn(&[1, 3, 8, 8], 1);
        let b = randn(&[1, 3, 4, 4], 1);
        let st = CellState::zeros(1, 4, 8, 8, DType::F64).unwrap();
        let inputs = CellInputs {
            local_error: Some(&a),
            sensory: Some(&b),
            ..Default::default()
        };
        assert!(matches!(cell.step(&inputs, &st, None), Err(crate::Error::Dimension(_))));
        let e = randn(&[1, 6, 8, 8], 1);
        let wrong_state = CellState::zeros(1, 4, 4, 4, DType::F64).unwrap();
        let inputs = CellInputs {
            local_error: Some(&e),
            ..Default::default()
        };
        assert!(matches!(cell.step(&inputs, &wrong_state, None), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn step_is_deterministic() {
        let (_, a) = build(cfg(0, 1), 5);
        let (_, b) = build(cfg(0, 1), 5);
        let e = randn(&[1, 6, 8, 8], 1);
        let st = CellState::zeros(1, 4, 8, 8, DType::F64).unwrap();
        let inp = CellInputs {
            local_error: Some(&e),
            ..Default::default()
        };
        let pa = ops::to_f64_vec(&a.step(&inp, &st, None).unwrap().prediction).unwrap();
        let pb = ops::to_f64_vec(&b.step(&inp, &st, None).unwrap().prediction).unwrap();
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
