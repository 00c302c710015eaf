//! Fully connected layer: `y = x·W + b` with `W` stored as `[in × out]`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, inp, out) = check(x, w, b)?;
    let mut y = Vec::with_capacity(batch * out);
    let wd = w.data();
    for row in x.data().chunks_exact(inp) {
        let mut acc = b.data().to_vec();
        for (i, &xv) in row.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &wd[i * out..(i + 1) * out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
        y.extend_from_slice(&acc);
    }
    Tensor::new(alloc::vec![batch, out], y)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let inp = w.dims()[0];
    let out = w.dims()[1];
    let batch = x.dims()[0];
    if grad.dims() != [batch, out] {
        return Err(Error::shape("dense backward", grad.dims(), &[batch, out]));
    }
    let wd = w.data();
    let mut gx = Tensor::zeros(&[batch, inp]);
    let mut gw = Tensor::zeros(&[inp, out]);
    let mut gb = Tensor::zeros(&[out]);
    for bi in 0..batch {
        let g = &grad.data()[bi * out..(bi + 1) * out];
        let xr = &x.data()[bi * inp..(bi + 1) * inp];
        for (a, &gv) in gb.data_mut().iter_mut().zip(g) {
            *a += gv;
        }
        let gxr = &mut gx.data_mut()[bi * inp..(bi + 1) * inp];
        for i in 0..inp {
            let wrow = &wd[i * out..(i + 1) * out];
            gxr[i] = wrow.iter().zip(g).map(|(&wv, &gv)| wv * gv).sum();
        }
        let gwd = gw.data_mut();
        for (i, &xv) in xr.iter().enumerate() {
            let gwrow = &mut gwd[i * out..(i + 1) * out];
            for (a, &gv) in gwrow.iter_mut().zip(g) {
                *a += xv * gv;
            }
        }
    }
    Ok((gx, gw, gb))
}

fn check<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 || x.dims()[1] != w.dims()[0] {
        return Err(Error::shape("dense input·weight", x.dims(), w.dims()));
    }
    if b.dims() != [w.dims()[1]] {
        return Err(Error::shape("dense bias", b.dims(), &w.dims()[1..]));
    }
    Ok((x.dims()[0], w.dims()[0], w.dims()[1]))
}
