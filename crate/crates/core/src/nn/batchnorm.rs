//! Per-channel batch normalisation over the batch and spatial axes.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Normalised activations and per-channel `1/sqrt(var + eps)`, kept for backward.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::Config(alloc::format!(
            "batch norm needs at least B×C input, got {dims:?}"
        )));
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

fn check_channel<T: Scalar>(what: &'static str, t: &Tensor<T>, c: usize) -> Result<()> {
    if t.dims() != [c] {
        return Err(Error::shape(what, t.dims(), &[c]));
    }
    Ok(())
}

/// Training-mode forward. Updates `running_mean`/`running_var` in place with
/// `running = momentum·running + (1 − momentum)·batch` (unbiased variance).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, c, s) = layout(x.dims())?;
    if b < 2 {
        return Err(Error::Config(
            "batch norm in training mode needs a batch of at least 2".into(),
        ));
    }
    for (what, t) in [("bn gamma", gamma), ("bn beta", beta)] {
        check_channel(what, t, c)?;
    }
    check_channel("bn running mean", running_mean, c)?;
    check_channel("bn running var", running_var, c)?;
    let n = (b * s) as f64;
    let xd = x.data();
    let mut y = Tensor::zeros(x.dims());
    let mut xhat = Tensor::zeros(x.dims());
    let mut inv_std = Vec::with_capacity(c);
    let mom = T::from_f64(momentum);
    let one = T::one();
    for ch in 0..c {
        let mut sum = 0.0f64;
        for bi in 0..b {
            sum += xd[(bi * c + ch) * s..][..s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0f64;
        for bi in 0..b {
            sq += xd[(bi * c + ch) * s..][..s]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / n;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let (mean_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            for k in off..off + s {
                let h = (xd[k] - mean_t) * istd_t;
                xhat.data_mut()[k] = h;
                y.data_mut()[k] = g * h + bt;
            }
        }
        inv_std.push(istd_t);
        let unbiased = if n > 1.0 { sq / (n - 1.0) } else { 0.0 };
        let rm = &mut running_mean.data_mut()[ch];
        *rm = mom * *rm + (one - mom) * mean_t;
        let rv = &mut running_var.data_mut()[ch];
        *rv = mom * *rv + (one - mom) * T::from_f64(unbiased);
    }
    Ok((y, NormCache { xhat, inv_std }))
}

pub fn batchnorm_forward_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, c, s) = layout(x.dims())?;
    for (what, t) in [
        ("bn gamma", gamma),
        ("bn beta", beta),
        ("bn running mean", running_mean),
        ("bn running var", running_var),
    ] {
        check_channel(what, t, c)?;
    }
    let mut y = Tensor::zeros(x.dims());
    let mut xhat = Tensor::zeros(x.dims());
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            let (m, istd) = (running_mean.data()[ch], inv_std[ch]);
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for k in off..off + s {
                let h = (x.data()[k] - m) * istd;
                xhat.data_mut()[k] = h;
                y.data_mut()[k] = g * h + bt;
            }
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Backward through training-mode normalisation (batch statistics depend on
/// the input). Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward_train<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, s) = layout(grad.dims())?;
    if grad.dims() != cache.xhat.dims() {
        return Err(Error::shape("bn backward", grad.dims(), cache.xhat.dims()));
    }
    let n = T::from_f64((b * s) as f64);
    let mut gx = Tensor::zeros(grad.dims());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let (gd, hd) = (grad.data(), cache.xhat.data());
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gh = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            for k in off..off + s {
                sum_g += gd[k];
                sum_gh += gd[k] * hd[k];
            }
        }
        gg.data_mut()[ch] = sum_gh;
        gb.data_mut()[ch] = sum_g;
        let scale = gamma.data()[ch] * cache.inv_std[ch] / n;
        for bi in 0..b {
            let off = (bi * c + ch) * s;
            for k in off..off + s {
                gx.data_mut()[k] = scale * (n * gd[k] - sum_g - hd[k] * sum_gh);
            }
        }
    }
    Ok((gx, gg, gb))
}

/// Backward through inference-mode normalisation (fixed statistics).
pub fn batchnorm_backward_infer<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, s) = layout(grad.dims())?;
    let mut gx = Tensor::zeros(grad.dims());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for k in off..off + s {
                let g = grad.data()[k];
                gx.data_mut()[k] = scale * g;
                gg.data_mut()[ch] += g * cache.xhat.data()[k];
                gb.data_mut()[ch] += g;
            }
        }
    }
    Ok((gx, gg, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(y: &Tensor<f64>, c: usize) -> Vec<(f64, f64)> {
        let (b, s) = (y.dims()[0], y.item_len() / c);
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..b)
                    .flat_map(|bi| y.data()[(bi * c + ch) * s..][..s].iter().copied())
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn normalises_each_channel() {
        let x = Tensor::from_fn(&[4, 3, 5], |i| ((i * 7919) % 23) as f64 * 0.5 - 3.0);
        let (g, b) = (Tensor::full(&[3], 1.0), Tensor::zeros(&[3]));
        let (mut rm, mut rv) = (Tensor::zeros(&[3]), Tensor::full(&[3], 1.0));
        let (y, _) = batchnorm_forward_train(&x, &g, &b, &mut rm, &mut rv, 0.9, 1e-5).unwrap();
        for (m, v) in stats(&y, 3) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_variance_gives_beta() {
        let x = Tensor::<f64>::full(&[3, 2, 2, 2], 4.2);
        let (g, b) = (Tensor::full(&[2], 2.0), Tensor::full(&[2], 3.0));
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        let (y, _) = batchnorm_forward_train(&x, &g, &b, &mut rm, &mut rv, 0.9, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_sample_batch_rejected_in_training() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4]);
        let (g, b) = (Tensor::full(&[2], 1.0), Tensor::zeros(&[2]));
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        assert!(batchnorm_forward_train(&x, &g, &b, &mut rm, &mut rv, 0.9, 1e-5).is_err());
        assert!(batchnorm_forward_infer(&x, &g, &b, &rm, &rv, 1e-5).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(alloc::vec![2, 1], alloc::vec![1.0f64, 3.0]).unwrap();
        let (g, b) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (Tensor::zeros(&[1]), Tensor::full(&[1], 1.0));
        batchnorm_forward_train(&x, &g, &b, &mut rm, &mut rv, 0.9, 1e-5).unwrap();
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1,3} is 2
        assert!((rv.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
