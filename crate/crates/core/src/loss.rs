//! Softmax and categorical cross-entropy.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() != 2 {
        return Err(Error::shape("softmax", logits.dims(), &[0, 0]));
    }
    let k = logits.dims()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(logits.dims().to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    /// Mean negative log-probability of the true class.
    pub loss: T,
    /// `(probs − onehot) / B`.
    pub grad: Tensor<T>,
    pub probs: Tensor<T>,
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    if logits.ndim() != 2 || logits.dims()[0] != labels.len() {
        return Err(Error::shape("cross entropy", logits.dims(), &[labels.len()]));
    }
    let (b, k) = (logits.dims()[0], logits.dims()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        // -log p_label = logsumexp - z_label
        loss += lse - (row[label] - m);
        probs.extend(row.iter().map(|&v| (v - m - lse).exp()));
    }
    let bt = T::from_f64(b as f64);
    let probs = Tensor::new(logits.dims().to_vec(), probs)?;
    let mut grad = probs.clone();
    for (bi, &label) in labels.iter().enumerate() {
        grad.data_mut()[bi * k + label] -= T::one();
    }
    for v in grad.data_mut() {
        *v /= bt;
    }
    Ok(CrossEntropy {
        loss: loss / bt,
        grad,
        probs,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
