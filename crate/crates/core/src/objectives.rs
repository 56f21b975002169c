//! Pixel and adversarial objectives.
//!
//! The adversarial terms use quadratic score targets: the discriminator pushes
//! real scores to `+1` and fake scores to `-1`, the generator pushes fake
//! scores to `+1`. Scores are batch means of the discriminator output.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Weights of the pixel and adversarial terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Number of network levels `L`; level `l` is weighted `(L - l) / L`.
    pub levels: usize,
    /// Weight of the first timestep. Every later step has weight 1.
    pub first_step: f64,
    /// Weight of the generator's adversarial term.
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            levels: 4,
            first_step: 0.0,
            adversarial: 100.0,
        }
    }
}

impl LossWeights {
    pub fn for_levels(levels: usize) -> Self {
        Self {
            levels,
            ..Self::default()
        }
    }

    pub fn time(&self, t: usize) -> f64 {
        if t == 0 {
            self.first_step
        } else {
            1.0
        }
    }

    pub fn level(&self, l: usize) -> f64 {
        (self.levels as f64 - l as f64) / self.levels as f64
    }
}

/// `sum_t sum_l time(t) * level(l) * ||target[t][l] - prediction[t][l]||^2`.
///
/// A plain sum of squares: nothing is divided by the element count.
pub fn pixel_loss(targets: &[Vec<Tensor>], predictions: &[Vec<Tensor>], weights: &LossWeights) -> Result<Tensor> {
    if targets.len() != predictions.len() {
        return Err(dim_err!(
            "{} target steps vs {} prediction steps",
            targets.len(),
            predictions.len()
        ));
    }
    let mut total: Option<Tensor> = None;
    for (t, (ys, ps)) in targets.iter().zip(predictions).enumerate() {
        if ys.len() != ps.len() || ys.len() != weights.levels {
            return Err(dim_err!(
                "step {t}: {} target levels, {} prediction levels, weights for {}",
                ys.len(),
                ps.len(),
                weights.levels
            ));
        }
        for (l, (y, p)) in ys.iter().zip(ps).enumerate() {
            if y.dims() != p.dims() {
                return Err(dim_err!(
                    "step {t} level {l}: target {:?} vs prediction {:?}",
                    y.dims(),
                    p.dims()
                ));
            }
            let w = weights.time(t) * weights.level(l);
            let term = (y.to_dtype(p.dtype())? - p)?.sqr()?.sum_all()?.affine(w, 0.0)?;
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
    }
    total.ok_or_else(|| dim_err!("pixel loss over zero steps"))
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} is {v}")))
    }
}

/// `(real - 1)^2 + (fake + 1)^2`.
pub fn discriminator_loss(real_score: f64, fake_score: f64) -> Result<f64> {
    let r = finite("real score", real_score)?;
    let p = finite("fake score", fake_score)?;
    Ok((r - 1.0).powi(2) + (p + 1.0).powi(2))
}

/// `(fake - 1)^2`.
pub fn generator_adv_loss(fake_score: f64) -> Result<f64> {
    let p = finite("fake score", fake_score)?;
    Ok((p - 1.0).powi(2))
}

pub fn total_generator_loss(pixel: f64, adv: f64, weights: &LossWeights) -> f64 {
    pixel + weights.adversarial * adv
}

/// Differentiable [`discriminator_loss`] on scalar score tensors.
pub fn discriminator_loss_t(real_score: &Tensor, fake_score: &Tensor) -> Result<Tensor> {
    Ok(((real_score - 1.0)?.sqr()? + (fake_score + 1.0)?.sqr()?)?)
}

/// Differentiable [`generator_adv_loss`].
pub fn generator_adv_loss_t(fake_score: &Tensor) -> Result<Tensor> {
    Ok((fake_score - 1.0)?.sqr()?)
}

pub fn total_generator_loss_t(pixel: &Tensor, adv: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok((pixel + adv.affine(weights.adversarial, 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use candle_core::Device;
    use proptest::prelude::*;

    fn full(v: f64, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn weight_rules() {
        let w = LossWeights::for_levels(4);
        assert_eq!(w.time(0), 0.0);
        assert_eq!(w.time(1), 1.0);
        assert_eq!(w.time(17), 1.0);
        assert_eq!(w.level(0), 1.0);
        let lv: Vec<_> = (0..4).map(|l| w.level(l)).collect();
        assert!(lv.windows(2).all(|p| p[1] < p[0]));
        assert_eq!(lv, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn identical_is_zero() {
        let y = vec![vec![full(0.3, (1, 3, 2, 2))]; 3];
        let l = pixel_loss(&y, &y, &LossWeights::for_levels(1)).unwrap();
        assert_eq!(ops::scalar(&l).unwrap(), 0.0);
    }

    #[test]
    fn hand_sum_of_half_differences() {
        let zeros = full(0.0, (1, 3, 2, 2));
        let halves = full(0.5, (1, 3, 2, 2));
        let targets = vec![vec![zeros.clone()], vec![zeros.clone()]];
        let preds = vec![vec![zeros], vec![halves]];
        let l = pixel_loss(&targets, &preds, &LossWeights::for_levels(1)).unwrap();
        assert_eq!(ops::scalar(&l).unwrap(), 3.0);
    }

    #[test]
    fn first_step_is_ignored() {
        let z = full(0.0, (1, 3, 2, 2));
        let targets = vec![vec![z.clone()], vec![z.clone()]];
        let preds = vec![vec![full(0.9, (1, 3, 2, 2))], vec![z]];
        let l = pixel_loss(&targets, &preds, &LossWeights::for_levels(1)).unwrap();
        assert_eq!(ops::scalar(&l).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let z = full(0.0, (1, 3, 2, 2));
        let w = LossWeights::for_levels(1);
        assert!(pixel_loss(&[vec![z.clone()]], &[], &w).is_err());
        let other = full(0.0, (1, 3, 4, 4));
        assert!(pixel_loss(&[vec![z.clone()]], &[vec![other]], &w).is_err());
        assert!(pixel_loss(&[vec![z.clone(), z.clone()]], &[vec![z.clone(), z]], &w).is_err());
    }

    #[test]
    fn adversarial_hand_values() {
        assert_eq!(discriminator_loss(1.0, -1.0).unwrap(), 0.0);
        assert_eq!(discriminator_loss(0.0, 0.0).unwrap(), 2.0);
        assert_eq!(discriminator_loss(0.5, -0.5).unwrap(), 0.5);
        assert_eq!(generator_adv_loss(1.0).unwrap(), 0.0);
        assert_eq!(generator_adv_loss(-1.0).unwrap(), 4.0);
        assert_eq!(generator_adv_loss(0.0).unwrap(), 1.0);
        assert!(matches!(discriminator_loss(f64::NAN, 0.0), Err(Error::Numeric(_))));
        assert!(matches!(generator_adv_loss(f64::INFINITY), Err(Error::Numeric(_))));
    }

    #[test]
    fn total_generator_hand_values() {
        let w = LossWeights::default();
        assert_eq!(total_generator_loss(3.0, 0.0, &w), 3.0);
        assert_eq!(total_generator_loss(0.0, 0.5, &w), 50.0);
        assert!((total_generator_loss(2.0, 0.01, &w) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_forms_agree() {
        let r = Tensor::new(0.3f64, &Device::Cpu).unwrap();
        let p = Tensor::new(-0.2f64, &Device::Cpu).unwrap();
        let d = ops::scalar(&discriminator_loss_t(&r, &p).unwrap()).unwrap();
        assert!((d - discriminator_loss(0.3, -0.2).unwrap()).abs() < 1e-15);
        let g = ops::scalar(&generator_adv_loss_t(&p).unwrap()).unwrap();
        assert!((g - generator_adv_loss(-0.2).unwrap()).abs() < 1e-15);
        let px = Tensor::new(2.0f64, &Device::Cpu).unwrap();
        let adv = Tensor::new(0.01f64, &Device::Cpu).unwrap();
        let tot = total_generator_loss_t(&px, &adv, &LossWeights::default()).unwrap();
        assert!((ops::scalar(&tot).unwrap() - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quadratic_scaling(vals in proptest::collection::vec(-1.0f64..1.0, 12), k in 0.1f64..5.0) {
            let z = full(0.0, (1, 3, 2, 2));
            let d = Tensor::from_vec(vals.clone(), (1, 3, 2, 2), &Device::Cpu).unwrap();
            let dk = d.affine(k, 0.0).unwrap();
            let w = LossWeights::for_levels(1);
            let base = ops::scalar(&pixel_loss(&[vec![z.clone()], vec![z.clone()]], &[vec![z.clone()], vec![d]], &w).unwrap()).unwrap();
            let scaled = ops::scalar(&pixel_loss(&[vec![z.clone()], vec![z.clone()]], &[vec![z], vec![dk]], &w).unwrap()).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((scaled - k * k * base).abs() <= 1e-9 * (1.0 + scaled));
        }

        #[test]
        fn adversarial_minima(r in -3.0f64..3.0, p in -3.0f64..3.0) {
            prop_assert!(discriminator_loss(r, p).unwrap() >= discriminator_loss(1.0, -1.0).unwrap());
            prop_assert!(generator_adv_loss(p).unwrap() >= generator_adv_loss(1.0).unwrap());
            if (r, p) != (1.0, -1.0) {
                prop_assert!(discriminator_loss(r, p).unwrap() > 0.0);
            }
        }
    }
}
