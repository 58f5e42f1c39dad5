//! Scalar abstraction so the numeric core runs in f32 or f64.
//!
//! Training and checkpoints use f32; gradient-checking oracles re-run the
//! same graphs in f64. Everything the kernels need beyond `num_traits::Float`
//! lives here.

use num_traits::Float;

/// Floating-point element type usable by tensors, tapes and kernels.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Copy
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn from_f32_lossy(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32_lossy(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32_lossy(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: f64) -> f64 {
        S::from_f64_lossy(v).to_f64_lossy()
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        for v in [0.0, -1.5, std::f64::consts::PI, 1e-300] {
            assert_eq!(roundtrip::<f64>(v), v);
        }
    }

    #[test]
    fn f32_roundtrip_matches_cast() {
        for v in [0.0, -1.5, std::f64::consts::PI, 0.1] {
            assert_eq!(roundtrip::<f32>(v), v as f32 as f64);
        }
    }
}
