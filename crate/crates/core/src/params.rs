//! Named parameter storage and the convolution layer built on it.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names such as
//! `level1.enc0.weight` or `disc.stage2.conv_a.bias`. Models are assembled
//! through a [`ParamSource`]: [`ParamInit`] creates fresh, seeded parameters,
//! [`ParamView`] binds to parameters that already exist (for example after
//! loading a checkpoint), optionally detached from the autodiff graph.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, key: &str) -> Option<&Var> {
        self.vars.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let tensor = tensor.to_dtype(self.dtype)?;
        self.vars.insert(key.into(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    /// Parameter keys with the given prefix, in storage order.
    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.vars.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Deep copy whose variables no longer share storage with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (k, v) in &self.vars {
            out.vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Bitwise comparison of every parameter under `prefix`.
    pub fn bit_equal(&self, other: &ParamStore, prefix: &str) -> Result<bool> {
        let a: Vec<_> = self.keys_with_prefix(prefix).collect();
        let b: Vec<_> = other.keys_with_prefix(prefix).collect();
        if a != b {
            return Ok(false);
        }
        for k in a {
            let x = self.vars[k].flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let y = other.vars[k].flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if x.iter().zip(&y).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn view(&self, detached: bool) -> ParamView<'_> {
        ParamView {
            store: self,
            detached,
        }
    }
}

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// First `count` entries set to `value`, the rest zero.
    Leading { count: usize, value: f64 },
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
}

/// Supplies parameter tensors to model constructors.
pub trait ParamSource {
    fn param(&mut self, key: &str, shape: &[usize], init: Init) -> Result<Tensor>;

    fn dtype(&self) -> DType;

    fn conv(&mut self, key: &str, spec: ConvSpec) -> Result<Conv2d> {
        self.conv_with_bias(key, spec, Init::Zeros)
    }

    fn conv_with_bias(&mut self, key: &str, spec: ConvSpec, bias: Init) -> Result<Conv2d> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = self.param(
            &format!("{key}.weight"),
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            Init::FanInUniform { fan_in },
        )?;
        let bias = self.param(&format!("{key}.bias"), &[spec.out_channels], bias)?;
        Ok(Conv2d { weight, bias, spec })
    }
}

/// Creates new parameters from a seeded generator and registers them in a store.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ParamSource for ParamInit<'_> {
    fn param(&mut self, key: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.vars.contains_key(key) {
            return Err(contract_err!("parameter {key} registered twice"));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Leading { count, value } => (0..n).map(|i| if i < count { value } else { 0.0 }).collect(),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(key.to_string(), var);
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Binds to parameters already present in a store.
pub struct ParamView<'a> {
    store: &'a ParamStore,
    detached: bool,
}

impl ParamSource for ParamView<'_> {
    fn param(&mut self, key: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let var = self
            .store
            .vars
            .get(key)
            .ok_or_else(|| contract_err!("missing parameter {key}"))?;
        if var.dims() != shape {
            return Err(dim_err!(
                "parameter {key} has shape {:?}, model expects {shape:?}",
                var.dims()
            ));
        }
        Ok(if self.detached {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    /// Same-padded 3x3 convolution.
    pub fn k3(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }
}

/// 2-d convolution with bias and "same" padding (`kernel / 2`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(dim_err!(
                "convolution expects {} input channels, got {c}",
                self.spec.in_channels
            ));
        }
        let y = crate::ops::conv2d(x, &self.weight, self.spec.stride)?;
        let b = self.bias.reshape((1, self.spec.out_channels, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(DType::F64);
        let mut b = ParamStore::new(DType::F64);
        ParamInit::new(&mut a, 7).conv("x", ConvSpec::k3(2, 3)).unwrap();
        ParamInit::new(&mut b, 7).conv("x", ConvSpec::k3(2, 3)).unwrap();
        assert!(a.bit_equal(&b, "").unwrap());
        let w = a.get("x.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bound = 1.0 / 18f64.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        let bias = a.get("x.bias").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn view_rejects_shape_mismatch() {
        let mut s = ParamStore::new(DType::F32);
        ParamInit::new(&mut s, 1).conv("c", ConvSpec::k3(2, 3)).unwrap();
        let err = s.view(true).conv("c", ConvSpec::k3(4, 3)).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
        assert!(s.view(true).conv("nope", ConvSpec::k3(2, 3)).is_err());
    }

    #[test]
    fn stride_two_halves_resolution() {
        let mut s = ParamStore::new(DType::F32);
        let conv = ParamInit::new(&mut s, 1).conv("c", ConvSpec::k3(2, 5).stride(2)).unwrap();
        let x = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 5, 4, 4]);
    }
}
