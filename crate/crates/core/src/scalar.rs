//! Floating-point abstraction shared by every numerical routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the engines are generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts a literal; panics only if the literal is not representable,
    /// which cannot happen for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Standard normal CDF evaluated in double precision.
pub fn norm_cdf<T: Scalar>(x: T) -> T {
    use statrs::function::erf::erfc;
    T::lit(0.5 * erfc(-x.as_f64() / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn norm_pdf<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    T::lit((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
}

/// Inverse of the standard normal CDF.
pub fn norm_inv_cdf<T: Scalar>(p: T) -> T {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    T::lit(n.inverse_cdf(p.as_f64()))
}
