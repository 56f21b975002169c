//! Small tensor helpers shared by the network, the pyramid and the discriminator.
//!
//! Every helper here has a well-defined backward pass in candle's autodiff.
//! Nearest upsampling is built from a broadcast rather than
//! `Tensor::upsample_nearest2d`, whose backward overwrites (instead of
//! accumulating) the gradient of its argument.

use candle_core::{DType, Tensor};

use crate::error::{dim_err, Result};

/// Logistic sigmoid written through `tanh` so that it stays differentiable.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Nearest-neighbour 2x upsampling of a `(B, C, H, W)` map.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// 2x2 average pooling of a `(B, C, H, W)` map with even `H` and `W`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("cannot halve odd spatial size {h}x{w}"));
    }
    Ok(x.avg_pool2d(2)?)
}

/// Keeps the top-left pixel of each 2x2 block.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("cannot halve odd spatial size {h}x{w}"));
    }
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, h / 2, w / 2))?)
}

/// Zero-padded convolution with `padding = kernel / 2`, lowered to patch extraction and a matrix product.
///
/// `weight` is `(Cout, Cin, k, k)`. Stride 1 or 2; with stride 2 the input sides must be even.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (cout, cin, k, k2) = weight.dims4()?;
    if cin != c || k != k2 {
        return Err(dim_err!("weight {:?} does not fit input {:?}", weight.dims(), x.dims()));
    }
    if stride != 1 && stride != 2 {
        return Err(dim_err!("unsupported stride {stride}"));
    }
    if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
        return Err(dim_err!("stride-2 convolution of odd spatial size {h}x{w}"));
    }
    let p = k / 2;
    let (ho, wo) = (h / stride, w / stride);
    let xp = if p > 0 {
        x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?
    } else {
        x.clone()
    };
    let mut patches = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            let v = xp.narrow(2, dy, h)?.narrow(3, dx, w)?;
            patches.push(if stride == 2 { subsample2(&v)? } else { v });
        }
    }
    let cols = if k == 1 {
        patches.pop().expect("one patch").reshape((b, c, ho * wo))?
    } else {
        Tensor::stack(&patches, 2)?.reshape((b, c * k * k, ho * wo))?
    };
    let wm = weight.reshape((cout, c * k * k))?;
    Ok(wm.broadcast_left(b)?.contiguous()?.matmul(&cols)?.reshape((b, cout, ho, wo))?)
}

/// Adds a leading batch axis to a `(C, H, W)` image; leaves 4-d tensors alone.
pub(crate) fn as_batch(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        3 => Ok((x.unsqueeze(0)?, true)),
        4 => Ok((x.clone(), false)),
        r => Err(dim_err!("expected a (C,H,W) image or (B,C,H,W) batch, got rank {r}")),
    }
}

pub(crate) fn undo_batch(x: Tensor, squeezed: bool) -> Result<Tensor> {
    if squeezed {
        Ok(x.squeeze(0)?)
    } else {
        Ok(x)
    }
}

/// Copies a tensor of any float dtype into a flat `f64` vector.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Sum of a tensor as an `f64`.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn upsample_repeats_each_pixel() {
        let x = Tensor::new(&[[[[1f64, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let flat = to_f64_vec(&upsample2(&x).unwrap()).unwrap();
        assert_eq!(
            flat,
            vec![
                1., 1., 2., 2., //
                1., 1., 2., 2., //
                3., 3., 4., 4., //
                3., 3., 4., 4.
            ]
        );
    }

    #[test]
    fn upsample_gradient_accumulates_with_other_uses() {
        let x = Var::new(&[[[[1f64, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        // d/dx [sum(up(x)) + sum(x)] = 4 + 1 per element
        let loss = (upsample2(&x).unwrap().sum_all().unwrap() + x.sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let g = to_f64_vec(grads.get(&x).unwrap()).unwrap();
        assert_eq!(g, vec![5.0; 4]);
    }

    #[test]
    fn sigmoid_matches_logistic() {
        let xs = [-3.0f64, -0.5, 0.0, 0.7, 4.0];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let got = to_f64_vec(&sigmoid(&t).unwrap()).unwrap();
        for (x, s) in xs.iter().zip(got) {
            assert!((s - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn subsample_keeps_top_left() {
        let x = Tensor::arange(0f64, 16., &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        assert_eq!(to_f64_vec(&subsample2(&x).unwrap()).unwrap(), vec![0., 2., 8., 10.]);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let dev = Device::Cpu;
        for (k, stride) in [(3, 1), (3, 2), (1, 2), (1, 1)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 6, 8), &dev).unwrap()).unwrap();
            let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
            let ours = conv2d(&x, &wt, stride).unwrap();
            let theirs = x.conv2d(&wt, k / 2, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            let diff = (&ours - &theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k{k} s{stride}: {diff}");
            let ga = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = theirs.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt] {
                let d = (ga.get(v).unwrap() - gb.get(v).unwrap()).unwrap();
                let d = d.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "k{k} s{stride} grad: {d}");
            }
        }
    }
}
