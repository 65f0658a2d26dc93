//! Scalar abstraction shared by every dense computation in the crate.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point storage type for feature maps and network weights.
///
/// Reductions (pooling, similarity, clustering) widen to `f64` through
/// [`Real::widen`] regardless of the storage type.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    #[inline]
    fn widen(self) -> f64 {
        // Float -> f64 never fails for f32/f64.
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn from_f32_lossless(v: f32) -> Self {
        Self::from_f32(v).unwrap_or_else(Self::nan)
    }
}

impl Real for f32 {}
impl Real for f64 {}
