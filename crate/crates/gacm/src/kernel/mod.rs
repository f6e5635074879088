//! Per-observation log-likelihood kernels.
//!
//! A kernel evaluates, for one observation `(eta, y)`, the Gaussian
//! log-likelihood (up to the constant `-(d/2) log 2 pi`, omitted everywhere)
//! together with its derivatives with respect to the `q` linear predictors.
//! Hessian values are reported against a fixed structural [`PairPattern`];
//! third derivatives, when available, against a fixed list of index triples.

mod logm;
mod mcd;

pub use logm::{LogmKernel, LogmWorkspace};
pub use mcd::{
    hess_block_counts_closed, hess_total_closed, third_block_counts_closed, third_total_closed,
    McdKernel, McdWorkspace,
};

use crate::layout::ThetaLayout;
use crate::{Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Structurally nonzero Hessian slots: ordered pairs `(j, k)` with `j <= k`,
/// sorted lexicographically. Off-pattern entries are identically zero for
/// every predictor value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPattern {
    q: usize,
    pairs: Vec<(u32, u32)>,
}

impl PairPattern {
    /// Build a pattern from pairs that are already sorted and unique.
    pub(crate) fn from_sorted(q: usize, pairs: Vec<(u32, u32)>) -> Self {
        debug_assert!(pairs.windows(2).all(|w| w[0] < w[1]), "pairs not sorted");
        debug_assert!(pairs.iter().all(|&(j, k)| j <= k && (k as usize) < q));
        PairPattern { q, pairs }
    }

    /// Fully dense upper triangle: all `(j, k)` with `j <= k`.
    pub fn dense(q: usize) -> Self {
        let mut pairs = Vec::with_capacity(q * (q + 1) / 2);
        for j in 0..q as u32 {
            for k in j..q as u32 {
                pairs.push((j, k));
            }
        }
        PairPattern { q, pairs }
    }

    /// Number of predictors the pattern refers to.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of stored slots.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// True when no slots are stored (never the case for real kernels).
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The ordered slots.
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    /// Position of `(j, k)` (requires `j <= k`), or `None` if the slot is a
    /// structural zero.
    pub fn position(&self, j: usize, k: usize) -> Option<usize> {
        debug_assert!(j <= k);
        self.pairs.binary_search(&(j as u32, k as u32)).ok()
    }

    /// Scatter pattern-aligned values into a full symmetric `q x q` matrix
    /// (test and oracle helper; structural zeros stay zero).
    pub fn to_full<T: Scalar>(&self, values: &[T]) -> DMatrix<T> {
        debug_assert_eq!(values.len(), self.pairs.len());
        let mut out = DMatrix::zeros(self.q, self.q);
        for (&(j, k), &v) in self.pairs.iter().zip(values) {
            out[(j as usize, k as usize)] = v;
            out[(k as usize, j as usize)] = v;
        }
        out
    }
}

/// A per-observation log-likelihood derivative kernel.
///
/// Kernels are stateless and shared across threads; all scratch lives in the
/// per-thread [`Kernel::Workspace`].
pub trait Kernel<T: Scalar>: Sync {
    /// Per-thread scratch space for evaluations.
    type Workspace: Send;

    /// Predictor/Theta layout this kernel was built for.
    fn layout(&self) -> &ThetaLayout;

    /// Short identifier ("mcd" or "logm").
    fn name(&self) -> &'static str;

    /// Structural Hessian pattern.
    fn pattern(&self) -> &PairPattern;

    /// Allocate a workspace sized for this kernel.
    fn make_workspace(&self) -> Self::Workspace;

    /// Log-likelihood of one observation.
    fn loglik(&self, ws: &mut Self::Workspace, eta: &[T], y: &[T]) -> Result<T>;

    /// Log-likelihood, gradient, and (optionally) Hessian values aligned with
    /// [`Kernel::pattern`]. `grad` must have length `q`; `hess`, when given,
    /// length `pattern().len()`.
    fn eval(
        &self,
        ws: &mut Self::Workspace,
        eta: &[T],
        y: &[T],
        grad: &mut [T],
        hess: Option<&mut [T]>,
    ) -> Result<T>;

    /// Structurally nonzero third-derivative triples `(i <= j <= k)`, sorted
    /// lexicographically, or `None` when third derivatives are unavailable.
    fn triples(&self) -> Option<&[(u32, u32, u32)]>;

    /// Third-derivative values aligned with [`Kernel::triples`].
    fn third(&self, ws: &mut Self::Workspace, eta: &[T], y: &[T], out: &mut [T]) -> Result<()>;

    /// Covariance matrix implied by one predictor row.
    fn sigma(&self, eta: &[T]) -> Result<DMatrix<T>>;

    /// Mean vector and covariance matrix for one predictor row.
    fn moments(&self, eta: &[T]) -> Result<(DVector<T>, DMatrix<T>)> {
        let d = self.layout().d;
        let sigma = self.sigma(eta)?;
        Ok((DVector::from_column_slice(&eta[..d]), sigma))
    }

    /// Number of predictors.
    fn q(&self) -> usize {
        self.layout().q
    }

    /// Response dimension.
    fn d(&self) -> usize {
        self.layout().d
    }
}

/// Shared input validation for kernel entry points: shapes, finiteness, and
/// the `|eta| <= 700` overflow guard on the log-variance (diagonal) slots.
pub(crate) fn check_inputs<T: Scalar>(lay: &ThetaLayout, eta: &[T], y: &[T]) -> Result<()> {
    use crate::Error;
    if eta.len() != lay.q {
        return Err(Error::ShapeMismatch {
            what: "predictor row length",
            got: eta.len(),
            expected: lay.q,
        });
    }
    if y.len() != lay.d {
        return Err(Error::ShapeMismatch {
            what: "response row length",
            got: y.len(),
            expected: lay.d,
        });
    }
    for &v in eta {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "predictor row",
                row: None,
            });
        }
    }
    for &v in y {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "response row",
                row: None,
            });
        }
    }
    let cap = T::of(700.0);
    for j in 0..lay.d {
        if eta[lay.d + j].abs() > cap {
            return Err(Error::ExpOverflow {
                value: eta[lay.d + j].to_f64(),
                row: None,
            });
        }
    }
    Ok(())
}
