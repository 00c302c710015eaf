//! Layer kernels with explicit forward/backward passes.
//!
//! Each layer's forward returns its output together with a [`Cache`]; the
//! matching backward consumes the cache and the upstream gradient and yields
//! the input gradient plus one gradient per trainable parameter, in the same
//! order as [`Layer::params`].

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod pool;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use batchnorm::NormCache;
pub use conv::SpatialRank;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Conv3d,
    MaxPool,
    BatchNorm,
    Dropout,
    Relu,
    Flatten,
    Concat,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub rank: SpatialRank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool {
    pub window: Vec<usize>,
    pub rank: SpatialRank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_hyper(channels, batchnorm::DEFAULT_MOMENTUM, batchnorm::DEFAULT_EPS)
    }

    pub fn with_hyper(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(alloc::format!(
                "batch norm needs eps > 0 and momentum in [0,1], got eps={eps} momentum={momentum}"
            )));
        }
        Ok(BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum,
            eps,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv(Conv<T>),
    MaxPool(MaxPool),
    BatchNorm(BatchNorm<T>),
    Dropout(Dropout),
    Relu,
    Flatten,
}

#[derive(Clone, Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    Pool { in_dims: Vec<usize>, argmax: Vec<usize> },
    Norm { cache: NormCache<T>, mode: Mode },
    Mask(Option<Vec<T>>),
    Output(Tensor<T>),
    Shape(Vec<usize>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv(c) if c.rank == SpatialRank::Two => LayerKind::Conv2d,
            Layer::Conv(_) => LayerKind::Conv3d,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Relu => LayerKind::Relu,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Trainable parameters, in gradient order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that still travels with the weights.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::BatchNorm(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => Vec::new(),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Dense(d) => {
                let y = dense::dense_forward(&x, &d.weight, &d.bias)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Conv(c) => {
                let y = conv::conv_forward(&x, &c.weight, &c.bias, c.rank)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::MaxPool(p) => {
                let (y, argmax) = pool::maxpool_forward(&x, &p.window, p.rank)?;
                Ok((
                    y,
                    Cache::Pool {
                        in_dims: x.dims().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::BatchNorm(b) => {
                let (y, cache) = match mode {
                    Mode::Train => batchnorm::batchnorm_forward_train(
                        &x,
                        &b.gamma,
                        &b.beta,
                        &mut b.running_mean,
                        &mut b.running_var,
                        b.momentum,
                        b.eps,
                    )?,
                    Mode::Infer => batchnorm::batchnorm_forward_infer(
                        &x,
                        &b.gamma,
                        &b.beta,
                        &b.running_mean,
                        &b.running_var,
                        b.eps,
                    )?,
                };
                Ok((y, Cache::Norm { cache, mode }))
            }
            Layer::Dropout(d) => {
                let (y, mask) = dropout::dropout_forward(&x, d.rate, mode, seed)?;
                Ok((y, Cache::Mask(mask)))
            }
            Layer::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                Ok((y.clone(), Cache::Output(y)))
            }
            Layer::Flatten => {
                let dims = x.dims().to_vec();
                let n = x.item_len();
                let y = x.reshape(&[dims[0], n])?;
                Ok((y, Cache::Shape(dims)))
            }
        }
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(&self, cache: &Cache<T>, grad: Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => {
                let (gx, gw, gb) = dense::dense_backward(x, &d.weight, &grad)?;
                Ok((gx, vec![gw, gb]))
            }
            (Layer::Conv(c), Cache::Input(x)) => {
                let (gx, gw, gb) = conv::conv_backward(x, &c.weight, &grad, c.rank)?;
                Ok((gx, vec![gw, gb]))
            }
            (Layer::MaxPool(_), Cache::Pool { in_dims, argmax }) => {
                Ok((pool::maxpool_backward(in_dims, argmax, &grad)?, Vec::new()))
            }
            (Layer::BatchNorm(b), Cache::Norm { cache, mode }) => {
                let (gx, gg, gb) = match mode {
                    Mode::Train => batchnorm::batchnorm_backward_train(cache, &b.gamma, &grad)?,
                    Mode::Infer => batchnorm::batchnorm_backward_infer(cache, &b.gamma, &grad)?,
                };
                Ok((gx, vec![gg, gb]))
            }
            (Layer::Dropout(_), Cache::Mask(mask)) => {
                Ok((dropout::dropout_backward(mask.as_deref(), &grad), Vec::new()))
            }
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = grad;
                for (v, &o) in g.data_mut().iter_mut().zip(y.data()) {
                    if o <= T::zero() {
                        *v = T::zero();
                    }
                }
                Ok((g, Vec::new()))
            }
            (Layer::Flatten, Cache::Shape(dims)) => Ok((grad.reshape(dims)?, Vec::new())),
            _ => Err(Error::Config("cache does not belong to this layer".into())),
        }
    }
}

/// A named chain of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<(String, Layer<T>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Sequential { layers: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) {
        self.layers.push((name.into(), layer));
    }

    /// Forward through every layer. Dropout layer `i` draws its mask from
    /// `derive(seed, i)`.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        self.forward_until(x, mode, seed, self.layers.len())
    }

    /// Forward through the first `n` layers only.
    pub fn forward_until(
        &mut self,
        mut x: Tensor<T>,
        mode: Mode,
        seed: u64,
        n: usize,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(n);
        for (i, (_, layer)) in self.layers.iter_mut().take(n).enumerate() {
            let (y, c) = layer.forward(x, mode, rng::derive(seed, i as u64))?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backward through the chain; parameter gradients come out in the same
    /// order as [`Sequential::params`].
    pub fn backward(&self, caches: &[Cache<T>], mut grad: Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        for ((_, layer), cache) in self.layers.iter().zip(caches).rev() {
            let (gx, gp) = layer.backward(cache, grad)?;
            per_layer.push(gp);
            grad = gx;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            for (p, t) in layer.params() {
                out.push((alloc::format!("{name}.{p}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|(_, l)| l.params_mut()).collect()
    }

    /// Parameters followed by buffers, per layer, in layer order.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            for (p, t) in layer.params().into_iter().chain(layer.buffers()) {
                out.push((alloc::format!("{name}.{p}"), t));
            }
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (_, layer) in self.layers.iter_mut() {
            match layer {
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                    out.push(&mut b.running_mean);
                    out.push(&mut b.running_var);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|(_, l)| matches!(l, Layer::BatchNorm(_)))
    }
}

/// Concatenate `B×dᵢ` matrices along the feature axis.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let b = first.dims()[0];
    let mut width = 0;
    for p in parts {
        if p.ndim() != 2 || p.dims()[0] != b {
            return Err(Error::shape("concat", first.dims(), p.dims()));
        }
        width += p.dims()[1];
    }
    let mut data = Vec::with_capacity(b * width);
    for bi in 0..b {
        for p in parts {
            data.extend_from_slice(p.item(bi));
        }
    }
    Tensor::new(vec![b, width], data)
}

/// Split a `B×Σdᵢ` gradient back into per-part `B×dᵢ` gradients.
pub fn split<T: Scalar>(grad: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let b = grad.dims()[0];
    let total: usize = widths.iter().sum();
    if grad.dims() != [b, total] {
        return Err(Error::shape("split", grad.dims(), &[b, total]));
    }
    let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(b * w)).collect();
    for bi in 0..b {
        let row = grad.item(bi);
        let mut off = 0;
        for (o, &w) in out.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::new(vec![b, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 2.0, 10.0, 3.0, 4.0, 5.0, 11.0]);
        let parts = split(&c, &[3, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn relu_blocks_negative_gradients() {
        let mut relu = Layer::<f64>::Relu;
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = relu.forward(x, Mode::Train, 0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (g, _) = relu.backward(&cache, Tensor::full(&[1, 3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_rejects_bad_hyper() {
        assert!(BatchNorm::<f32>::with_hyper(4, 0.9, 0.0).is_err());
    }
}
