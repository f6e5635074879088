//! Additive models for multivariate Gaussian responses in which both the mean
//! vector and the covariance matrix vary with covariates.
//!
//! The response of observation `i` is `y_i ~ N(mu_i, Sigma_i)` with `y_i` in
//! `R^d`. Each observation carries `q = d + d(d+1)/2` linear predictors: the
//! first `d` give the mean vector, the remaining `d(d+1)/2` fill a symmetric
//! matrix `Theta_i` (diagonal first, then the strict lower triangle in
//! row-wise order; see [`layout::ThetaLayout`]). Two parametrisations map
//! `Theta_i` to a covariance matrix:
//!
//! * [`kernel::McdKernel`] — modified Cholesky decomposition:
//!   `Sigma^{-1} = T' D^{-2} T` with `T` unit lower triangular taken from the
//!   off-diagonal slots and `D^2 = exp(diagonal slots)`. Log-likelihood
//!   derivatives are available to third order and the Hessian has a sparse
//!   structural pattern.
//! * [`kernel::LogmKernel`] — matrix logarithm: `Sigma = exp(Theta)` via
//!   eigendecomposition. Derivatives are available to second order and the
//!   Hessian is dense.
//!
//! Each predictor is an additive combination of an intercept, linear terms,
//! and penalized cubic B-splines ([`basis`]). Coefficients are estimated by
//! maximizing a Laplace approximate marginal likelihood, with smoothing
//! parameters updated by Fellner-Schall steps ([`fit`]). Derivative
//! accumulation across observations runs in memory-bounded blocks with an
//! optional parsimonious path that exploits intercept-only predictors
//! ([`accum`]).
//!
//! Everything numeric is generic over the floating-point scalar through
//! [`Scalar`]; `f64` aliases for the main entry points live at the crate
//! root.

pub mod accum;
pub mod basis;
pub mod error;
pub mod fit;
pub mod kernel;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};

/// Floating-point scalar type used throughout the crate.
///
/// Implemented by `f32` and `f64` via the blanket impl. The two helper
/// methods move constants and tolerances across the generic boundary.
pub trait Scalar: nalgebra::RealField + Copy {
    /// Convert an `f64` constant into this scalar type.
    #[inline]
    fn of(v: f64) -> Self {
        nalgebra::convert(v)
    }

    /// Convert this scalar to `f64` for reporting and serialization.
    #[inline]
    fn to_f64(self) -> f64 {
        nalgebra::try_convert(self).expect("scalar representable as f64")
    }
}

impl<T: nalgebra::RealField + Copy> Scalar for T {}

pub use kernel::{Kernel, LogmKernel, McdKernel, PairPattern};

/// Double-precision model specification.
pub type ModelSpec64 = model::ModelSpec<f64>;
/// Double-precision fit result.
pub type FitState64 = fit::FitState<f64>;

#[cfg(test)]
mod scalar_tests {
    use super::Scalar;

    #[test]
    fn of_and_to_f64_round_trip() {
        let x = <f64 as Scalar>::of(1.25);
        assert_eq!(x, 1.25);
        assert_eq!(x.to_f64(), 1.25);
        let y = <f32 as Scalar>::of(0.5);
        assert_eq!(y, 0.5f32);
        assert_eq!(y.to_f64(), 0.5);
    }
}
