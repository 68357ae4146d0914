//! Shared numeric kernels: compensated summation, special functions, and
//! dense linear algebra sized for estimating-equation stacks.

pub mod linalg;
pub mod special;
pub mod sum;

use crate::Scalar;

/// Converts an `f64` constant into the working scalar type.
pub(crate) fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant must be representable in the scalar type")
}
