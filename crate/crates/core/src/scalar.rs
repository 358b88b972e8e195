//! Scalar abstraction for the numeric core.
//!
//! All tensors, layers and the training loop are generic over [`Scalar`]
//! (f32 for production use, f64 for tolerance and gradient checks).
//! Transcendentals are routed through `libm` so that encode/decode produce
//! the same bits on every platform; `std` float intrinsics may differ
//! between libms.

use num_traits::{Float, FromPrimitive};

/// Dtype tag written into the weights container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtypeTag {
    F32 = 0,
    F64 = 1,
    Bytes = 2,
}

impl DtypeTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DtypeTag::F32),
            1 => Some(DtypeTag::F64),
            2 => Some(DtypeTag::Bytes),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float + FromPrimitive + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: DtypeTag;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    // libm-backed transcendentals; deterministic across platforms.
    fn exp_(self) -> Self;
    fn ln_(self) -> Self;
    fn tanh_(self) -> Self;
    fn erf_(self) -> Self;

    /// Round half away from zero (the codec's quantizer convention).
    fn round_away(self) -> Self;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(b: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: DtypeTag = DtypeTag::F32;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp_(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn ln_(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn tanh_(self) -> Self {
        libm::tanhf(self)
    }
    #[inline]
    fn erf_(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn round_away(self) -> Self {
        self.round()
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
    const BYTE_WIDTH: usize = 4;
}

impl Scalar for f64 {
    const DTYPE: DtypeTag = DtypeTag::F64;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp_(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln_(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn tanh_(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn erf_(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn round_away(self) -> Self {
        self.round()
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(b: &[u8]) -> Self {
        f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
    }
    const BYTE_WIDTH: usize = 8;
}

/// Standard normal CDF, used by the rate model.
#[inline]
pub fn norm_cdf<T: Scalar>(x: T) -> T {
    let half = T::of_f64(0.5);
    let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt2).erf_())
}

/// Standard normal pdf (the derivative of [`norm_cdf`]).
#[inline]
pub fn norm_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::of_f64(0.3989422804014327);
    inv_sqrt_2pi * (-(x * x) * T::of_f64(0.5)).exp_()
}
