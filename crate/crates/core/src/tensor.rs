//! Dense 4-D tensors in (batch, channel, height, width) layout.

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { b, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Flat index; debug-checked.
    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(b < self.b && c < self.c && h < self.h && w < self.w);
        ((b * self.c + c) * self.h + h) * self.w + w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor { shape, data: vec![T::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, v: T) -> Tensor<T> {
        Tensor { shape, data: vec![v; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Gaussian entries with the given std, from a named stream.
    pub fn randn(shape: Shape, std: f64, rng: &mut SplitRng) -> Tensor<T> {
        let data = (0..shape.numel()).map(|_| T::of_f64(rng.normal() * std)).collect();
        Tensor { shape, data }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor { shape: Shape::new(1, 1, 1, 1), data: vec![v] }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.idx(b, c, h, w);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape.numel(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if let Some((i, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: context.to_string(),
                detail: format!("element {i} of {} is {v}", self.shape),
            });
        }
        Ok(())
    }

    /// Per-channel mean and population variance over batch and spatial dims.
    pub fn channel_stats(&self) -> (Vec<T>, Vec<T>) {
        let s = self.shape;
        let n = T::of_f64((s.b * s.h * s.w) as f64);
        let mut means = vec![T::zero(); s.c];
        let mut vars = vec![T::zero(); s.c];
        for c in 0..s.c {
            let mut acc = T::zero();
            for b in 0..s.b {
                for h in 0..s.h {
                    for w in 0..s.w {
                        acc = acc + self.at(b, c, h, w);
                    }
                }
            }
            means[c] = acc / n;
        }
        for c in 0..s.c {
            let m = means[c];
            let mut acc = T::zero();
            for b in 0..s.b {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let d = self.at(b, c, h, w) - m;
                        acc = acc + d * d;
                    }
                }
            }
            vars[c] = acc / n;
        }
        (means, vars)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Rearrange 2x2 spatial patches into channels. Within each patch values are
/// laid out row-major, grouped per source channel (channel-major outer order).
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::shape(format!(
            "space_to_depth: spatial extents {}x{} not divisible by {}",
            s.h, s.w, factor
        )));
    }
    let f2 = factor * factor;
    let out_shape = Shape::new(s.b, s.c * f2, s.h / factor, s.w / factor);
    let mut out = Tensor::zeros(out_shape);
    for b in 0..s.b {
        for c in 0..s.c {
            for oh in 0..out_shape.h {
                for ow in 0..out_shape.w {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let oc = c * f2 + dy * factor + dx;
                            let v = x.at(b, c, oh * factor + dy, ow * factor + dx);
                            out.set(b, oc, oh, ow, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let f2 = factor * factor;
    if s.c % f2 != 0 {
        return Err(Error::shape(format!(
            "depth_to_space: channel count {} not divisible by {}",
            s.c, f2
        )));
    }
    let out_shape = Shape::new(s.b, s.c / f2, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(out_shape);
    for b in 0..s.b {
        for oc in 0..out_shape.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let c = oc * f2 + dy * factor + dx;
                            out.set(b, oc, h * factor + dy, w * factor + dx, x.at(b, c, h, w));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn channel_stats_constant_tensor() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), 2.5);
        let (m, v) = x.channel_stats();
        for c in 0..3 {
            assert!((m[c] - 2.5).abs() < 1e-12);
            assert!(v[c].abs() < 1e-12);
        }
    }

    #[test]
    fn channel_stats_two_point() {
        let x = t((1, 1, 1, 2), vec![0.0, 2.0]);
        let (m, v) = x.channel_stats();
        assert_eq!(m[0], 1.0);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn channel_stats_matches_two_pass_reference() {
        let mut rng = SplitRng::new(5);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 5, 7), 1.7, &mut rng);
        let (m, v) = x.channel_stats();
        let s = x.shape();
        for c in 0..s.c {
            let mut vals = Vec::new();
            for b in 0..s.b {
                for h in 0..s.h {
                    for w in 0..s.w {
                        vals.push(x.at(b, c, h, w));
                    }
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / vals.len() as f64;
            assert!((m[c] - mean).abs() < 1e-10);
            assert!((v[c] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn space_to_depth_single_patch_layout() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn space_to_depth_channel_major_grouping() {
        // Two channels P, Q: output channels must be [P(a,b,c,d), Q(a,b,c,d)].
        let x = t((1, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn depth_to_space_roundtrip_bit_exact() {
        let mut rng = SplitRng::new(9);
        let x = Tensor::<f32>::randn(Shape::new(2, 3, 6, 8), 1.0, &mut rng);
        let y = space_to_depth(&x, 2).unwrap();
        let back = depth_to_space(&y, 2).unwrap();
        assert_eq!(x.data(), back.data());
    }

    #[test]
    fn space_to_depth_rejects_odd_extents() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(space_to_depth(&x, 2).is_err());
    }
}
