//! Residual image scorer used for adversarial training.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::params::{Conv2d, ConvSpec, ParamSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// Residual stages; each halves the resolution and doubles the width.
    pub stages: usize,
    /// Per-sample channel standardization inside each residual block.
    pub normalize: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            base_channels: 16,
            stages: 4,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualStage {
    conv_a: Conv2d,
    conv_b: Conv2d,
    skip: Conv2d,
}

impl ResidualStage {
    fn forward(&self, x: &Tensor, normalize: bool) -> Result<Tensor> {
        let mut y = self.conv_a.forward(x)?;
        if normalize {
            y = standardize(&y)?;
        }
        let y = self.conv_b.forward(&y.relu()?)?;
        Ok((y + self.skip.forward(x)?)?.relu()?)
    }
}

fn standardize(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(c.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Scores single RGB frames; higher means "more real".
#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    stem: Conv2d,
    stages: Vec<ResidualStage>,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, src: &mut impl ParamSource) -> Result<Self> {
        let div = 1usize << cfg.stages;
        if cfg.height % div != 0 || cfg.width % div != 0 {
            return Err(input_err!(
                "discriminator input {}x{} must be divisible by 2^stages = {div}",
                cfg.height,
                cfg.width
            ));
        }
        let base = cfg.base_channels;
        let stem = src.conv("disc.stem", ConvSpec::k3(3, base))?;
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut cin = base;
        for s in 0..cfg.stages {
            let cout = base << (s + 1);
            let p = format!("disc.stage{s}");
            stages.push(ResidualStage {
                conv_a: src.conv(&format!("{p}.conv_a"), ConvSpec::k3(cin, cout).stride(2))?,
                conv_b: src.conv(&format!("{p}.conv_b"), ConvSpec::k3(cout, cout))?,
                skip: src.conv(&format!("{p}.skip"), ConvSpec::k3(cin, cout).kernel(1).stride(2))?,
            });
            cin = cout;
        }
        let head_weight = src.param("disc.head.weight", &[cin, 1], crate::params::Init::FanInUniform { fan_in: cin })?;
        let head_bias = src.param("disc.head.bias", &[1], crate::params::Init::Zeros)?;
        Ok(Self {
            cfg,
            stem,
            stages,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Per-frame scores of a `(B,3,H,W)` batch, shape `(B,)`.
    pub fn score(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        if (c, h, w) != (3, self.cfg.height, self.cfg.width) {
            return Err(dim_err!(
                "discriminator expects (3,{},{}) frames, got {:?}",
                self.cfg.height,
                self.cfg.width,
                frames.dims()
            ));
        }
        let x = frames.to_dtype(self.head_weight.dtype())?;
        let mut x = self.stem.forward(&x)?.relu()?;
        for stage in &self.stages {
            x = stage.forward(&x, self.cfg.normalize)?;
        }
        let pooled = x.mean(3)?.mean(2)?;
        let out = pooled.matmul(&self.head_weight)?.broadcast_add(&self.head_bias)?;
        Ok(out.squeeze(1)?)
    }

    /// Batch-mean score as a scalar tensor.
    pub fn mean_score(&self, frames: &Tensor) -> Result<Tensor> {
        Ok(self.score(frames)?.mean_all()?)
    }

    pub fn dtype(&self) -> DType {
        self.head_weight.dtype()
    }
}
