//! Raw numeric kernels behind the graph ops: im2col convolution backed by a
//! small rayon GEMM, per-pixel channel matrix multiplies, and nearest
//! upsampling. All loops accumulate in a fixed order so results are
//! bit-identical regardless of thread scheduling.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// out (m x n) = a (m x k) * b (k x n)
pub fn gemm_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for l in 0..k {
            let aij = a[i * k + l];
            if aij == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aij * bv;
            }
        }
    });
}

/// out (m x n) = a (m x k) * b' where b is (n x k): dot products of rows.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// out (m x n) = a' * b where a is (k x m), b is (k x n).
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for l in 0..k {
            let av = a[l * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Patch matrix for one batch element: (c_in*k*k) x (oh*ow), zero padding.
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    b: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let s = x.shape();
    let cols = oh * ow;
    let mut out = vec![T::zero(); s.c * k * k * cols];
    for c in 0..s.c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let base = row * cols;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        out[base + oy * ow + ox] = x.at(b, c, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add a patch-matrix gradient back onto the input gradient.
fn col2im_add<T: Scalar>(
    gcols: &[T],
    gx: &mut Tensor<T>,
    b: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let s = gx.shape();
    let cols = oh * ow;
    for c in 0..s.c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let base = row * cols;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let g = gcols[base + oy * ow + ox];
                        let cur = gx.at(b, c, iy as usize, ix as usize);
                        gx.set(b, c, iy as usize, ix as usize, cur + g);
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is (c_out, c_in, k, k)
/// already mask-multiplied by the caller when a kernel mask applies.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws.b, ws.c, ws.h);
    debug_assert_eq!(ws.h, ws.w);
    debug_assert_eq!(c_in, xs.c);
    let oh = conv_out_extent(xs.h, k, stride, pad);
    let ow = conv_out_extent(xs.w, k, stride, pad);
    let cols = oh * ow;
    let mut out = Tensor::zeros(Shape::new(xs.b, c_out, oh, ow));
    for b in 0..xs.b {
        let patch = im2col(x, b, k, stride, pad, oh, ow);
        let offset = b * c_out * cols;
        gemm_into(
            weight.data(),
            &patch,
            c_out,
            c_in * k * k,
            cols,
            &mut out.data_mut()[offset..offset + c_out * cols],
        );
    }
    if let Some(bias) = bias {
        debug_assert_eq!(bias.len(), c_out);
        let data = out.data_mut();
        for b in 0..xs.b {
            for (co, &bv) in bias.iter().enumerate() {
                let base = (b * c_out + co) * cols;
                for v in &mut data[base..base + cols] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, (unmasked) weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Vec<T>>) {
    let xs = x.shape();
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws.b, ws.c, ws.h);
    let gys = gy.shape();
    let (oh, ow) = (gys.h, gys.w);
    let cols = oh * ow;

    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gbias = if want_bias { Some(vec![T::zero(); c_out]) } else { None };

    for b in 0..xs.b {
        let gyb = &gy.data()[b * c_out * cols..(b + 1) * c_out * cols];
        let patch = im2col(x, b, k, stride, pad, oh, ow);
        // dW += gy_b * patch'
        let gw_b = gemm_nt(gyb, &patch, c_out, cols, c_in * k * k);
        for (dst, src) in gw.data_mut().iter_mut().zip(&gw_b) {
            *dst = *dst + *src;
        }
        // dX_b via columns: W' * gy_b
        let gcols = gemm_tn(weight.data(), gyb, c_in * k * k, c_out, cols);
        col2im_add(&gcols, &mut gx, b, k, stride, pad, oh, ow);
        if let Some(gb) = gbias.as_mut() {
            for co in 0..c_out {
                let mut acc = T::zero();
                for &g in &gyb[co * cols..(co + 1) * cols] {
                    acc = acc + g;
                }
                gb[co] = gb[co] + acc;
            }
        }
    }
    (gx, gw, gbias)
}

/// y[b,:,p] = W x[b,:,p] for every pixel p; `w` is (C, C, 1, 1).
pub fn matmul_channels<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let c = s.c;
    let p = s.spatial();
    let mut out = Tensor::zeros(s);
    for b in 0..s.b {
        let xb = &x.data()[b * c * p..(b + 1) * c * p];
        gemm_into(w.data(), xb, c, c, p, &mut out.data_mut()[b * c * p..(b + 1) * c * p]);
    }
    out
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.b, s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(out_shape);
    for b in 0..s.b {
        for c in 0..s.c {
            for h in 0..out_shape.h {
                for w in 0..out_shape.w {
                    out.set(b, c, h, w, x.at(b, c, h / factor, w / factor));
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(gy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = gy.shape();
    let in_shape = Shape::new(s.b, s.c, s.h / factor, s.w / factor);
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..s.b {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let cur = gx.at(b, c, h / factor, w / factor);
                    gx.set(b, c, h / factor, w / factor, cur + gy.at(b, c, h, w));
                }
            }
        }
    }
    gx
}
