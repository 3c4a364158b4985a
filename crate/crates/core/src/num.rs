//! Scalar abstraction shared by the numeric parts of the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar used for scores and entropies: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; never fails for finite inputs.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    fn of_count(n: u64) -> Self {
        Self::from_u64(n).expect("u64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Population mean and variance computed in input order.
///
/// Values are shifted by the first one before summing: with `d_i = v_i - v_0`
/// and `m = sum(d_i) / n`, the mean is `v_0 + m` and the variance is
/// `sum((d_i - m)^2) / n`. Equal values therefore give their own value and
/// a variance of exactly zero. Returns `(0, 0)` for an empty slice.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let Some(&first) = values.first() else {
        return (0.0, 0.0);
    };
    let n = values.len() as f64;
    let m = values.iter().map(|v| v - first).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| (v - first - m) * (v - first - m))
        .sum::<f64>()
        / n;
    (first + m, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_variance_basic() {
        assert_eq!(mean_variance(&[]), (0.0, 0.0));
        assert_eq!(mean_variance(&[0.5]), (0.5, 0.0));
        let (m, v) = mean_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_eq!(v, 1.25);
        let same = [0.1 + 0.2; 10];
        assert_eq!(mean_variance(&same), (0.1 + 0.2, 0.0));
    }

    #[test]
    fn conversions_round_trip() {
        assert_eq!(<f32 as Scalar>::of(0.5), 0.5f32);
        assert_eq!(<f64 as Scalar>::of_count(7), 7.0);
        assert_eq!(1.25f32.as_f64(), 1.25);
    }
}
