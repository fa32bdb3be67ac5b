//! Floating-point scalar abstraction for the simulation core.
//!
//! Everything numerical in this crate is generic over [`Scalar`], so the same
//! engine runs in `f32` or `f64`. Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as the amplitude component type.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for tolerances and literals.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    /// `1/sqrt(2)`, the ubiquitous superposition weight.
    fn frac_1_sqrt_2() -> Self {
        Self::one() / Self::SQRT_2()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Complex amplitude over a [`Scalar`].
pub type Amplitude<T> = Complex<T>;

/// Squared magnitude of a complex amplitude.
pub fn norm_sqr<T: Scalar>(z: Amplitude<T>) -> T {
    z.re * z.re + z.im * z.im
}
