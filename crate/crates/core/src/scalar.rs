use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for embeddings and scores.
///
/// Implemented for `f32` and `f64`. Persisted stores always hold `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::nan)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}
