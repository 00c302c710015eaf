//! 2D/3D cross-correlation with a 3-wide kernel per spatial axis, stride 1
//! and zero "same" padding.
//!
//! Both ranks share one implementation: a 2D input `B×C×H×W` is treated as
//! `B×C×1×H×W` with a kernel depth of one.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialRank {
    Two,
    Three,
}

impl SpatialRank {
    pub fn axes(self) -> usize {
        match self {
            SpatialRank::Two => 2,
            SpatialRank::Three => 3,
        }
    }
}

/// Shape of a `B×C×D×H×W` activation plus kernel extents.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn of(dims: &[usize], rank: SpatialRank) -> Result<Self> {
        match (rank, dims) {
            (SpatialRank::Two, &[b, c, h, w]) => Ok(Geometry {
                batch: b,
                channels: c,
                depth: 1,
                height: h,
                width: w,
            }),
            (SpatialRank::Three, &[b, c, d, h, w]) => Ok(Geometry {
                batch: b,
                channels: c,
                depth: d,
                height: h,
                width: w,
            }),
            _ => Err(Error::Config(alloc::format!(
                "expected a {}-axis spatial input, got dims {dims:?}",
                rank.axes()
            ))),
        }
    }

    pub fn plane(&self) -> usize {
        self.depth * self.height * self.width
    }
}

pub fn kernel_dims(rank: SpatialRank, out_channels: usize, in_channels: usize) -> Vec<usize> {
    match rank {
        SpatialRank::Two => vec![out_channels, in_channels, KERNEL, KERNEL],
        SpatialRank::Three => vec![out_channels, in_channels, KERNEL, KERNEL, KERNEL],
    }
}

struct Taps {
    kd: usize,
    kh: usize,
    kw: usize,
}

impl Taps {
    fn of(rank: SpatialRank) -> Self {
        let kd = if rank == SpatialRank::Three { KERNEL } else { 1 };
        Taps {
            kd,
            kh: KERNEL,
            kw: KERNEL,
        }
    }
    fn count(&self) -> usize {
        self.kd * self.kh * self.kw
    }
}

/// Offset range: for kernel tap `k` with half-width `pad`, output positions
/// `lo..hi` read input position `pos + k - pad`, all in-bounds.
#[inline]
fn span(k: usize, pad: usize, n: usize) -> (usize, usize, isize) {
    let off = k as isize - pad as isize;
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 { n.saturating_sub(off as usize) } else { n };
    (lo, hi.max(lo), off)
}

fn validate<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, rank: SpatialRank) -> Result<(Geometry, usize)> {
    let g = Geometry::of(x.dims(), rank)?;
    if g.plane() == 0 {
        return Err(Error::Config("spatial dims must be at least 1".into()));
    }
    let wd = w.dims();
    if wd.len() != 2 + rank.axes() || wd[2..].iter().any(|&k| k != KERNEL) {
        return Err(Error::shape("conv kernel", wd, &kernel_dims(rank, 0, g.channels)));
    }
    if wd[1] != g.channels {
        return Err(Error::shape("conv channels", x.dims(), wd));
    }
    if b.dims() != [wd[0]] {
        return Err(Error::shape("conv bias", b.dims(), &wd[..1]));
    }
    Ok((g, wd[0]))
}

/// Unfold one sample into a `(C·taps)×plane` patch matrix; out-of-bounds
/// taps stay zero.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, taps: &Taps, col: &mut [T]) {
    let (d, h, wid) = (g.depth, g.height, g.width);
    let plane = g.plane();
    let (pd, ph, pw) = (taps.kd / 2, taps.kh / 2, taps.kw / 2);
    col.fill(T::zero());
    for ic in 0..g.channels {
        let iplane = &x[ic * plane..][..plane];
        for kz in 0..taps.kd {
            let (z0, z1, dz) = span(kz, pd, d);
            for ky in 0..taps.kh {
                let (y0, y1, dy) = span(ky, ph, h);
                for kx in 0..taps.kw {
                    let (x0, x1, dx) = span(kx, pw, wid);
                    let t = (kz * taps.kh + ky) * taps.kw + kx;
                    let crow = &mut col[(ic * taps.count() + t) * plane..][..plane];
                    if x1 <= x0 {
                        continue;
                    }
                    for z in z0..z1 {
                        let sz = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let o = (z * h + y) * wid;
                            let start = ((sz * h + sy) * wid + x0) as isize + dx;
                            let start = start as usize;
                            crow[o + x0..o + x1].copy_from_slice(&iplane[start..start + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, taps: &Taps, gx: &mut [T]) {
    let (d, h, wid) = (g.depth, g.height, g.width);
    let plane = g.plane();
    let (pd, ph, pw) = (taps.kd / 2, taps.kh / 2, taps.kw / 2);
    for ic in 0..g.channels {
        let gplane = &mut gx[ic * plane..][..plane];
        for kz in 0..taps.kd {
            let (z0, z1, dz) = span(kz, pd, d);
            for ky in 0..taps.kh {
                let (y0, y1, dy) = span(ky, ph, h);
                for kx in 0..taps.kw {
                    let (x0, x1, dx) = span(kx, pw, wid);
                    let t = (kz * taps.kh + ky) * taps.kw + kx;
                    let crow = &col[(ic * taps.count() + t) * plane..][..plane];
                    if x1 <= x0 {
                        continue;
                    }
                    for z in z0..z1 {
                        let sz = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let o = (z * h + y) * wid;
                            let start = (((sz * h + sy) * wid + x0) as isize + dx) as usize;
                            for (gi, &c) in gplane[start..start + (x1 - x0)].iter_mut().zip(&crow[o + x0..o + x1]) {
                                *gi += c;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums so the loop vectorises.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().copied().sum::<T>() + tail
}

pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, rank: SpatialRank) -> Result<Tensor<T>> {
    let (g, out_ch) = validate(x, w, b, rank)?;
    let taps = Taps::of(rank);
    let plane = g.plane();
    let k = g.channels * taps.count();
    let mut out_dims = x.dims().to_vec();
    out_dims[1] = out_ch;
    let mut out = Tensor::zeros(&out_dims);
    let mut col = vec![T::zero(); k * plane];
    let wd = w.data();
    for bi in 0..g.batch {
        im2col(
            &x.data()[bi * g.channels * plane..][..g.channels * plane],
            &g,
            &taps,
            &mut col,
        );
        let od = &mut out.data_mut()[bi * out_ch * plane..][..out_ch * plane];
        for oc in 0..out_ch {
            let orow = &mut od[oc * plane..][..plane];
            orow.fill(b.data()[oc]);
            for (ki, &wv) in wd[oc * k..(oc + 1) * k].iter().enumerate() {
                axpy(wv, &col[ki * plane..][..plane], orow);
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    rank: SpatialRank,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = Geometry::of(x.dims(), rank)?;
    let out_ch = w.dims()[0];
    let mut expect = x.dims().to_vec();
    expect[1] = out_ch;
    if grad.dims() != expect.as_slice() {
        return Err(Error::shape("conv backward", grad.dims(), &expect));
    }
    let taps = Taps::of(rank);
    let plane = g.plane();
    let k = g.channels * taps.count();
    let mut gx = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(w.dims());
    let mut gb = Tensor::zeros(&[out_ch]);
    let mut col = vec![T::zero(); k * plane];
    let mut gcol = vec![T::zero(); k * plane];
    let ones = vec![T::one(); plane];
    let wd = w.data();
    let sample = g.channels * plane;
    for bi in 0..g.batch {
        im2col(&x.data()[bi * sample..][..sample], &g, &taps, &mut col);
        gcol.fill(T::zero());
        let gd = &grad.data()[bi * out_ch * plane..][..out_ch * plane];
        for oc in 0..out_ch {
            let grow = &gd[oc * plane..][..plane];
            gb.data_mut()[oc] += dot(grow, &ones);
            let gwrow = &mut gw.data_mut()[oc * k..(oc + 1) * k];
            for (ki, gwv) in gwrow.iter_mut().enumerate() {
                *gwv += dot(grow, &col[ki * plane..][..plane]);
                axpy(wd[oc * k + ki], grow, &mut gcol[ki * plane..][..plane]);
            }
        }
        col2im(&gcol, &g, &taps, &mut gx.data_mut()[bi * sample..][..sample]);
    }
    Ok((gx, gw, gb))
}
