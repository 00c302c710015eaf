//! Inverted dropout: kept units are scaled by `1/(1 − rate)` during training
//! so inference is the identity.

use alloc::vec::Vec;

use rand::Rng as _;

use super::Mode;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_RATE: f64 = 0.25;

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(alloc::format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Returns the output and the per-element scale mask (`None` when the layer
/// acts as the identity).
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut r = rng::rng(seed);
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if r.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad.clone(),
        Some(mask) => {
            let mut g = grad.clone();
            for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
            g
        }
    }
}
