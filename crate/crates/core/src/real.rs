use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar type of all tensor math.
///
/// `f32` is the training/inference dtype; `f64` is the gradient-checking
/// dtype (central finite differences are unreliable in 32-bit). Every kernel
/// in the crate is generic over this trait so that both dtypes run the exact
/// same code path.
pub trait Real: Float + Debug + Display + Default + Send + Sync + Sum + 'static {
    const BITS: u32;

    #[inline]
    fn of(x: f64) -> Self {
        num_traits::cast(x).expect("finite f64 converts to any Real")
    }

    #[inline]
    fn f64(self) -> f64 {
        num_traits::cast(self).expect("Real converts to f64")
    }
}

impl Real for f32 {
    const BITS: u32 = 32;
}

impl Real for f64 {
    const BITS: u32 = 64;
}
