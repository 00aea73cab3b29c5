//! Scalar abstraction used by the network and loss code.
//!
//! Training runs in `f32`. Gradient checks rerun the same generic code in
//! `f64`, where central finite differences are accurate enough to judge an
//! analytic backward pass against a `1e-4` relative tolerance. Keeping every
//! layer and loss generic over [`Real`] means the checked code path is the
//! trained code path, not a parallel reimplementation.

use std::iter::Sum;

use ndarray::NdFloat;

/// Floating-point scalar for network parameters, activations, and losses.
///
/// `NdFloat` brings the `ndarray` linear-algebra bounds (including
/// `general_mat_mul`); `Sum` covers iterator reductions.
pub trait Real: NdFloat + Sum {
    /// Lossless-enough conversion from `f64` literals and precomputed
    /// constants. Panics only if the target type cannot represent the value
    /// class at all, which no finite constant in this crate triggers.
    fn real(x: f64) -> Self {
        Self::from(x).expect("finite f64 constant representable in Real type")
    }

    /// Widens to `f64` for logging and metric accumulation.
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `R::real` that reads well in formula-heavy code.
pub fn real<R: Real>(x: f64) -> R {
    R::real(x)
}
