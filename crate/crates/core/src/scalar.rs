//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};

/// Floating point scalar: `f32` or `f64`.
///
/// Calibration runs in `f64`; `f32` is supported by the generic kernels so the
/// same code can be exercised at lower precision.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Copy
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts a literal; every literal used in this crate is representable.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Convergence floor for iterative kernels: `max(requested, 64·eps)`.
    #[inline]
    fn tolerance(requested: f64) -> Self {
        let floor = Self::epsilon() * Self::lit(64.0);
        let req = Self::lit(requested);
        if req > floor {
            req
        } else {
            floor
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Round half to even, the tie rule used by the quantizers.
#[inline]
pub fn round_half_even<T: Scalar>(x: T) -> T {
    let r = x.round();
    if (r - x).abs() == T::lit(0.5) {
        T::lit(2.0) * (x / T::lit(2.0)).round()
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_even() {
        assert_eq!(round_half_even(2.5_f64), 2.0);
        assert_eq!(round_half_even(3.5_f64), 4.0);
        assert_eq!(round_half_even(-2.5_f64), -2.0);
        assert_eq!(round_half_even(-3.5_f32), -4.0);
        assert_eq!(round_half_even(2.4_f64), 2.0);
        assert_eq!(round_half_even(-0.6_f64), -1.0);
    }
}
