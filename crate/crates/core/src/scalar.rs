//! Floating point scalar abstraction.
//!
//! Every numerical routine in this crate is generic over [`Real`], so the same
//! filter and smoother run in `f32` or `f64`. Tolerances quoted in the tests
//! are for `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// floating point: f32 or f64
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Draws from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draws from U[0, 1).
    fn standard_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($f:ty) => {
        impl Real for $f {
            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$f>>::sample(&StandardNormal, rng)
            }

            #[inline]
            fn standard_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.random::<$f>()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// log(Σ exp(v)) without overflow. Returns −∞ for an empty slice or when
/// every entry is −∞.
pub fn log_sum_exp<F: Real>(values: &[F]) -> F {
    let max = values.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    if max == F::infinity() {
        return max;
    }
    let sum: F = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log density of N(mean, var) at `x`.
#[inline]
pub fn normal_log_density<F: Real>(x: F, mean: F, var: F) -> F {
    let d = x - mean;
    -F::lit(0.5) * ((F::TAU()).ln() + var.ln()) - d * d / (F::lit(2.0) * var)
}

/// Wraps an angle to (−π, π].
#[inline]
pub fn wrap_angle<F: Real>(a: F) -> F {
    let pi = F::PI();
    let two_pi = F::TAU();
    let mut r = a % two_pi;
    if r <= -pi {
        r += two_pi;
    } else if r > pi {
        r -= two_pi;
    }
    r
}
