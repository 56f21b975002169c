//! Benchmark fixtures shared by the criterion targets.

use mspn_core::data::{generate_moving_digits, GlyphSource, MovingDigitsConfig};
use mspn_core::params::{ParamInit, ParamStore};
use mspn_core::{DType, Mspn, NetworkConfig, Result, Tensor};

/// Two-level 32x32 network with the given hidden width, f32, seed 0.
pub fn small_network(hidden: usize) -> Result<(ParamStore, Mspn)> {
    let cfg = NetworkConfig {
        levels: 2,
        height: 32,
        width: 32,
        hidden,
        base_channels: 8,
        ..Default::default()
    };
    let mut store = ParamStore::new(DType::F32);
    Mspn::new(cfg.clone(), &mut ParamInit::new(&mut store, 0))?;
    let model = Mspn::new(cfg, &mut store.view(false))?;
    Ok((store, model))
}

/// A `(batch, n, 3, 32, 32)` batch of single moving digits.
pub fn digit_batch(batch: usize, n: usize) -> Result<Tensor> {
    let data = generate_moving_digits(&MovingDigitsConfig {
        count: batch,
        seq_len: n,
        height: 32,
        width: 32,
        digits: 1,
        glyphs: GlyphSource::Bundled { scale: 2 },
        ..Default::default()
    })?;
    data.batch(&(0..batch).collect::<Vec<_>>(), DType::F32)
}
