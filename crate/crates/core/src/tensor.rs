//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::{Float, NumAssign, NumCast};

use crate::error::{Error, Result};

/// Element type of a tensor. Training runs in `f32`, gradient checking in `f64`.
pub trait Scalar: Float + NumAssign + Default + Debug + Send + Sync + core::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).unwrap_or_else(Self::nan)
    }
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &dims, &[data.len()]));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        assert!(check_dims(dims).is_ok(), "invalid tensor dims {dims:?}");
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.dims, self.data)
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Number of elements per item of the leading axis.
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Borrow item `i` of the leading axis.
    pub fn item(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut dims = Vec::with_capacity(first.ndim() + 1);
        dims.push(items.len());
        dims.extend_from_slice(&first.dims);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape("stack", &first.dims, &t.dims));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(dims, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Config(alloc::format!(
            "tensor dims must be non-empty and positive, got {dims:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn stack_and_item() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), &[2, 2]);
        assert_eq!(s.item(1), &[3.0, 4.0]);
    }
}
