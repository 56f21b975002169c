//! Per-level prediction targets and two-population prediction errors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::ops;

/// Operator used to halve a frame between pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// 2x2 block mean.
    #[default]
    AvgPool,
    /// Top-left pixel of each 2x2 block.
    Nearest,
}

impl Downsample {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        let (x, squeezed) = ops::as_batch(x)?;
        let y = match self {
            Downsample::AvgPool => ops::avg_pool2(&x)?,
            Downsample::Nearest => ops::subsample2(&x)?,
        };
        ops::undo_batch(y, squeezed)
    }
}

/// RGB images of one frame at `L` resolutions; level `l` is `H/2^l x W/2^l`.
#[derive(Debug, Clone)]
pub struct FramePyramid {
    levels: Vec<Tensor>,
}

impl FramePyramid {
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }
}

/// Checks that `(h, w)` halves cleanly `levels - 1` times.
pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let (mut h, mut w) = (h, w);
    for l in 1..levels {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!(
                "cannot build pyramid level {l}: level {} is {h}x{w}, which is not divisible by 2",
                l - 1
            ));
        }
        h /= 2;
        w /= 2;
    }
    Ok(())
}

/// Builds an `levels`-deep pyramid from a `(3,H,W)` frame or a `(B,3,H,W)` batch.
///
/// Level 0 is the input itself (shared, not copied).
pub fn build_pyramid(frame: &Tensor, levels: usize, op: Downsample) -> Result<FramePyramid> {
    if levels == 0 {
        return Err(dim_err!("a pyramid needs at least one level"));
    }
    let dims = frame.dims();
    if dims.len() < 3 {
        return Err(dim_err!("expected an image with channel, height and width axes, got {dims:?}"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    check_divisible(h, w, levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(frame.clone());
    for l in 1..levels {
        let next = op.apply(&out[l - 1])?;
        out.push(next);
    }
    Ok(FramePyramid { levels: out })
}

/// Six-channel prediction error: `[relu(target - prediction), relu(prediction - target)]`.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    data: Tensor,
}

impl ErrorMap {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn positive(&self) -> Result<Tensor> {
        Ok(self.data.narrow(self.channel_axis(), 0, 3)?)
    }

    pub fn negative(&self) -> Result<Tensor> {
        Ok(self.data.narrow(self.channel_axis(), 3, 3)?)
    }

    fn channel_axis(&self) -> usize {
        self.data.rank() - 3
    }
}

pub fn compute_error(target: &Tensor, prediction: &Tensor) -> Result<ErrorMap> {
    if target.dims() != prediction.dims() {
        return Err(dim_err!(
            "target {:?} and prediction {:?} differ in shape",
            target.dims(),
            prediction.dims()
        ));
    }
    let rank = target.rank();
    if rank < 3 {
        return Err(dim_err!("expected an image with channel, height and width axes"));
    }
    let diff = (target - prediction)?;
    let pos = diff.relu()?;
    let neg = diff.neg()?.relu()?;
    Ok(ErrorMap {
        data: Tensor::cat(&[pos, neg], rank - 3)?,
    })
}
