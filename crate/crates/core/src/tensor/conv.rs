//! Raw convolution, pooling and pixel-shuffle kernels over (N, C, H, W) arrays.
//!
//! Convolutions are stride-1 with "same" zero padding (`pad = k / 2`), lowered
//! to GEMM through im2col. Work is split across threads in fixed row chunks so
//! results are bitwise deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, CowArray, Ix2};

use super::Scalar;

/// Copies one im2col row: the (c, ki, kj) tap of the kernel laid out over the
/// output raster. `plane` is the (H*W) input channel plane.
fn fill_col_row<T: Scalar>(
    row: &mut [T],
    plane: &[T],
    h: usize,
    w: usize,
    ki: usize,
    kj: usize,
    pad: usize,
) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(w);
    if lo >= hi {
        return;
    }
    let n = hi - lo;
    for y in 0..h {
        let yi = y as isize + ki as isize - pad as isize;
        if yi < 0 || yi >= h as isize {
            continue;
        }
        let src = yi as usize * w + lo + kj - pad;
        let dst = y * w + lo;
        row[dst..dst + n].copy_from_slice(&plane[src..src + n]);
    }
}

/// Transpose of `fill_col_row`: scatter-adds a column row back into the
/// gradient plane.
fn acc_col_row<T: Scalar>(
    row: &[T],
    plane: &mut [T],
    h: usize,
    w: usize,
    ki: usize,
    kj: usize,
    pad: usize,
) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(w);
    if lo >= hi {
        return;
    }
    let n = hi - lo;
    for y in 0..h {
        let yi = y as isize + ki as isize - pad as isize;
        if yi < 0 || yi >= h as isize {
            continue;
        }
        let src = y * w + lo;
        let dst = yi as usize * w + lo + kj - pad;
        for i in 0..n {
            plane[dst + i] += row[src + i];
        }
    }
}

/// im2col for one sample: (C, H, W) -> (C*k*k, H*W). For k == 1 this is a
/// zero-copy reshape.
fn sample_cols<'a, T: Scalar>(
    xn: &'a [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> CowArray<'a, T, Ix2> {
    let hw = h * w;
    if k == 1 {
        let view = ndarray::ArrayView2::from_shape((c, hw), xn).expect("contiguous input");
        return CowArray::from(view);
    }
    let mut cols = Array2::<T>::zeros((c * k * k, hw));
    cols.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            let ci = r / (k * k);
            let ki = (r / k) % k;
            let kj = r % k;
            let plane = &xn[ci * hw..(ci + 1) * hw];
            fill_col_row(row.as_slice_mut().unwrap(), plane, h, w, ki, kj, pad);
        });
    CowArray::from(cols)
}

/// Deterministic row-parallel `out = a . b` (optionally accumulating).
fn par_matmul<T: Scalar>(a: &ArrayView2<T>, b: &ArrayView2<T>, out: &mut Array2<T>, beta: T) {
    let rows = a.nrows();
    let chunk = rows.div_ceil(rayon::current_num_threads()).max(1);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, ac)| {
            general_mat_mul(T::one(), &ac, b, beta, &mut oc);
        });
}

/// Forward convolution. `w` is (O, C, k, k); output keeps the input spatial
/// size (stride 1, pad = k/2, odd k).
pub fn conv2d_fwd<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    bias: Option<&[T]>,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let (o, cw, k, k2) = w.dim();
    assert_eq!(c, cw, "conv2d: {c} input channels vs weight expecting {cw}");
    assert_eq!(k, k2, "conv2d: non-square kernel");
    assert_eq!(pad, k / 2, "conv2d: same padding only");
    let hw = h * wd;
    let w2 = w.to_shape((o, c * k * k)).expect("contiguous weight");
    let xs = x.to_shape((n, c * hw)).expect("contiguous input");
    let mut out = Array4::<T>::zeros((n, o, h, wd));
    for ni in 0..n {
        let cols = sample_cols(xs.row(ni).to_slice().unwrap(), c, h, wd, k, pad);
        let mut y2 = out
            .index_axis_mut(Axis(0), ni)
            .into_shape_with_order((o, hw))
            .unwrap();
        let chunk = o.div_ceil(rayon::current_num_threads()).max(1);
        y2.axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .zip(w2.view().axis_chunks_iter(Axis(0), chunk).into_par_iter())
            .for_each(|(mut oc, wc)| {
                general_mat_mul(T::one(), &wc, &cols.view(), T::zero(), &mut oc);
            });
        if let Some(b) = bias {
            y2.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(oi, mut row)| {
                    let bv = b[oi];
                    row.mapv_inplace(|v| v + bv);
                });
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_bwd_x<T: Scalar>(
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    pad: usize,
    x_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (n, c, h, wd) = x_dim;
    let (o, _, k, _) = w.dim();
    let hw = h * wd;
    let ckk = c * k * k;
    let w2 = w.to_shape((o, ckk)).expect("contiguous weight");
    let wt = w2.t();
    let mut dx = Array4::<T>::zeros(x_dim);
    for ni in 0..n {
        let dy2 = dy
            .index_axis(Axis(0), ni)
            .into_shape_with_order((o, hw))
            .unwrap();
        if k == 1 {
            let mut dx2 = dx
                .index_axis_mut(Axis(0), ni)
                .into_shape_with_order((c, hw))
                .unwrap();
            let chunk = c.div_ceil(rayon::current_num_threads()).max(1);
            dx2.axis_chunks_iter_mut(Axis(0), chunk)
                .into_par_iter()
                .zip(wt.axis_chunks_iter(Axis(0), chunk).into_par_iter())
                .for_each(|(mut oc, wc)| {
                    general_mat_mul(T::one(), &wc, &dy2, T::zero(), &mut oc);
                });
            continue;
        }
        let mut dcols = Array2::<T>::zeros((ckk, hw));
        par_matmul(&wt, &dy2, &mut dcols, T::zero());
        let mut dxn = dx.index_axis_mut(Axis(0), ni);
        dxn.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ci, mut plane)| {
                let ps = plane.as_slice_mut().unwrap();
                for ki in 0..k {
                    for kj in 0..k {
                        let r = (ci * k + ki) * k + kj;
                        acc_col_row(dcols.row(r).to_slice().unwrap(), ps, h, wd, ki, kj, pad);
                    }
                }
            });
    }
    dx
}

/// Gradient w.r.t. the convolution weight.
pub fn conv2d_bwd_w<T: Scalar>(
    x: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    pad: usize,
    w_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let (o, _, k, _) = w_dim;
    let hw = h * wd;
    let ckk = c * k * k;
    let xs = x.to_shape((n, c * hw)).expect("contiguous input");
    let mut dw2 = Array2::<T>::zeros((o, ckk));
    for ni in 0..n {
        let cols = sample_cols(xs.row(ni).to_slice().unwrap(), c, h, wd, k, pad);
        let dy2 = dy
            .index_axis(Axis(0), ni)
            .into_shape_with_order((o, hw))
            .unwrap();
        let colst = cols.t();
        let chunk = o.div_ceil(rayon::current_num_threads()).max(1);
        dw2.axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .zip(dy2.axis_chunks_iter(Axis(0), chunk).into_par_iter())
            .for_each(|(mut oc, dyc)| {
                general_mat_mul(T::one(), &dyc, &colst, T::one(), &mut oc);
            });
    }
    dw2.into_shape_with_order(w_dim).unwrap()
}

/// Gradient w.r.t. the bias: sum of dy over batch and space.
pub fn conv2d_bwd_b<T: Scalar>(dy: &ArrayView4<T>) -> Array1<T> {
    dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}

/// Non-overlapping k x k area-average pooling.
pub fn avg_pool<T: Scalar>(x: &ArrayView4<T>, k: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert!(h % k == 0 && w % k == 0, "avg_pool: dims not divisible by {k}");
    let (ho, wo) = (h / k, w / k);
    let inv = T::from_f(1.0 / (k * k) as f64);
    let mut out = Array4::<T>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[[y * k + dy, xo * k + dx]];
                        }
                    }
                    dst[[y, xo]] = s * inv;
                }
            }
        }
    }
    out
}

pub fn avg_pool_bwd<T: Scalar>(dy: &ArrayView4<T>, k: usize) -> Array4<T> {
    let (n, c, ho, wo) = dy.dim();
    let inv = T::from_f(1.0 / (k * k) as f64);
    let mut dx = Array4::<T>::zeros((n, c, ho * k, wo * k));
    for ni in 0..n {
        for ci in 0..c {
            let src = dy.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = dx.index_axis_mut(Axis(0), ni);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for y in 0..ho {
                for xo in 0..wo {
                    let g = src[[y, xo]] * inv;
                    for dyk in 0..k {
                        for dxk in 0..k {
                            dst[[y * k + dyk, xo * k + dxk]] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Space-to-depth, factor 2. Channel order within each 2x2 cell is row-major:
/// out channel c*4 + (dy*2 + dx) holds in[c] at offset (dy, dx).
pub fn pixel_unshuffle<T: Scalar>(x: &ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle: odd spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((n, c * 4, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let co = ci * 4 + dy * 2 + dx;
                    for y in 0..ho {
                        for xo in 0..wo {
                            out[[ni, co, y, xo]] = x[[ni, ci, 2 * y + dy, 2 * xo + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Depth-to-space, factor 2; exact inverse of `pixel_unshuffle`.
pub fn pixel_shuffle<T: Scalar>(x: &ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert!(c % 4 == 0, "pixel_shuffle: channels not divisible by 4");
    let co = c / 4;
    let mut out = Array4::<T>::zeros((n, co, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..co {
            for dy in 0..2 {
                for dx in 0..2 {
                    let cs = ci * 4 + dy * 2 + dx;
                    for y in 0..h {
                        for xo in 0..w {
                            out[[ni, ci, 2 * y + dy, 2 * xo + dx]] = x[[ni, cs, y, xo]];
                        }
                    }
                }
            }
        }
    }
    out
}
