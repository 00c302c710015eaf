//! Non-overlapping max pooling. Backward routes each window's gradient to
//! its argmax; ties resolve to the lowest flat index.

use alloc::vec::Vec;

use super::conv::{Geometry, SpatialRank};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Forward output plus, per output element, the flat input index it came from.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: &[usize],
    rank: SpatialRank,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = Geometry::of(x.dims(), rank)?;
    let [wd, wh, ww] = window3(window, rank)?;
    if g.depth % wd != 0 || g.height % wh != 0 || g.width % ww != 0 {
        return Err(Error::Config(alloc::format!(
            "pool window {window:?} does not divide spatial dims {:?}",
            &x.dims()[2..]
        )));
    }
    let (od, oh, ow) = (g.depth / wd, g.height / wh, g.width / ww);
    let mut out_dims = x.dims().to_vec();
    let n = out_dims.len();
    out_dims[n - 2] = oh;
    out_dims[n - 1] = ow;
    if rank == SpatialRank::Three {
        out_dims[2] = od;
    }
    let planes = g.batch * g.channels;
    let in_plane = g.plane();
    let out_plane = od * oh * ow;
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut argmax = Vec::with_capacity(planes * out_plane);
    let xd = x.data();
    for p in 0..planes {
        let base = p * in_plane;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for dz in 0..wd {
                        for dy in 0..wh {
                            let row = ((z * wd + dz) * g.height + y * wh + dy) * g.width + xo * ww;
                            for dx in 0..ww {
                                let idx = base + row + dx;
                                let v = xd[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(out_dims, out)?, argmax))
}

pub fn maxpool_backward<T: Scalar>(in_dims: &[usize], argmax: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.len() != argmax.len() {
        return Err(Error::shape("maxpool backward", grad.dims(), &[argmax.len()]));
    }
    let mut gx = Tensor::zeros(in_dims);
    let gxd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        gxd[idx] += g;
    }
    Ok(gx)
}

fn window3(window: &[usize], rank: SpatialRank) -> Result<[usize; 3]> {
    match (rank, window) {
        (SpatialRank::Two, &[h, w]) if h > 0 && w > 0 => Ok([1, h, w]),
        (SpatialRank::Three, &[d, h, w]) if d > 0 && h > 0 && w > 0 => Ok([d, h, w]),
        _ => Err(Error::Config(alloc::format!("invalid pool window {window:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn picks_window_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool_forward(&x, &[2, 2], SpatialRank::Two).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 7.0);
        let (y, arg) = maxpool_forward(&x, &[2, 2], SpatialRank::Two).unwrap();
        let g = Tensor::full(y.dims(), 1.0);
        let gx = maxpool_backward(x.dims(), &arg, &g).unwrap();
        let expect: Vec<f64> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(gx.data(), expect.as_slice());
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(
            maxpool_forward(&x, &[2, 2], SpatialRank::Two),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn three_d_window() {
        let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64);
        let (y, arg) = maxpool_forward(&x, &[2, 2, 2], SpatialRank::Three).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(arg, vec![7]);
    }
}
