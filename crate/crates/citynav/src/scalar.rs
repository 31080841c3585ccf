//! Floating-point scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};

/// Floating-point scalar: f32 or f64.
///
/// Bounds cover what the search and optimization kernels need: IEEE float
/// arithmetic, conversions from primitive counts, and printable debug
/// output in property-test failure messages.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from the crate-level `Scalar` (f64).
    fn from_scalar(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    /// Lossy conversion to f64.
    fn to_scalar(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
