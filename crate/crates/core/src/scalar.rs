use std::fmt::{Debug, Display};

use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    NdFloat + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn erf(self) -> Self;
    fn erfc(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
}

/// Standard normal CDF, `Φ(z) = ½ erfc(−z/√2)`.
#[inline]
pub fn std_normal_cdf<T: Scalar>(z: T) -> T {
    T::of(0.5) * (-z * T::of(std::f64::consts::FRAC_1_SQRT_2)).erfc()
}

/// `Φ(b) − Φ(a)` for standard-normal arguments `a ≤ b`, evaluated on the
/// tail that avoids cancellation.
pub fn std_normal_interval<T: Scalar>(a: T, b: T) -> T {
    let half = T::of(0.5);
    let k = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let m = if a >= T::zero() {
        // both in the upper tail
        half * ((a * k).erfc() - (b * k).erfc())
    } else if b <= T::zero() {
        half * ((-b * k).erfc() - (-a * k).erfc())
    } else {
        half * ((b * k).erf() - (a * k).erf())
    };
    m.max(T::zero())
}
