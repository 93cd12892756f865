//! Element type abstraction: training runs in `f32`, gradient checks in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element of a [`crate::tensor::Tensor`].
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` literal into the element type.
#[inline(always)]
pub fn fl<E: Scalar>(v: f64) -> E {
    E::from(v).expect("f64 value representable in scalar type")
}
