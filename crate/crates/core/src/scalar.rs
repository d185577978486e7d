//! Scalar abstraction for the float paths.
//!
//! All tensor math is generic over [`Scalar`] so the same code runs in f32
//! (the serialized/CLI precision) and f64 (used by the finite-difference
//! gradient harness, where f32 quantization would swamp the tolerances).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64; used for constants and PRNG draws.
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// Conversion from a ternary weight.
    fn from_i8_c(x: i8) -> Self {
        Self::from_i8(x).expect("i8 fits every float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Round to nearest, ties to even, without leaving the scalar type.
pub fn round_ties_even<F: Scalar>(x: F) -> F {
    let floor = x.floor();
    let frac = x - floor;
    let half = F::from_f64_c(0.5);
    if frac > half {
        floor + F::one()
    } else if frac < half {
        floor
    } else {
        // Tie: pick the even neighbour.
        let two = F::from_f64_c(2.0);
        if (floor / two).floor() * two == floor {
            floor
        } else {
            floor + F::one()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_even() {
        assert_eq!(round_ties_even(2.5f64), 2.0);
        assert_eq!(round_ties_even(3.5f64), 4.0);
        assert_eq!(round_ties_even(-2.5f64), -2.0);
        assert_eq!(round_ties_even(-3.5f64), -4.0);
        assert_eq!(round_ties_even(0.5f32), 0.0);
        assert_eq!(round_ties_even(1.5f32), 2.0);
    }

    #[test]
    fn non_ties_round_nearest() {
        assert_eq!(round_ties_even(2.4f32), 2.0);
        assert_eq!(round_ties_even(2.6f32), 3.0);
        assert_eq!(round_ties_even(-0.4f64), 0.0);
        assert_eq!(round_ties_even(-0.6f64), -1.0);
    }
}
