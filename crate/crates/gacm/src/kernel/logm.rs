//! Matrix-logarithm parametrisation.
//!
//! Here `Sigma = exp(Theta)` with `Theta` the symmetric matrix assembled from
//! one predictor row. Writing the eigendecomposition `Theta = U G U'` with
//! `G = diag(gamma)`, `s = U'(y - mu)`, the log-likelihood is
//!
//! ```text
//! l = -1/2 * ( sum_j gamma_j + sum_j exp(-gamma_j) s_j^2 )
//! ```
//!
//! First and second derivatives follow from the Daleckii-Krein form of the
//! Frechet derivative of `exp(-Theta)`: every formula is a contraction of
//! first (`h1`) and second (`h2`) divided differences of `x -> exp(-x)` over
//! the eigenvalues. Ties and near-ties are handled by switching to the
//! analytic limits below a relative gap threshold, so derivatives stay
//! accurate through eigenvalue crossings. Every contraction is invariant to
//! the (arbitrary) eigenvalue order and eigenvector signs returned by the
//! solver.
//!
//! The Hessian is structurally dense; third derivatives are not available for
//! this parametrisation.

use super::{check_inputs, Kernel, PairPattern};
use crate::layout::ThetaLayout;
use crate::{Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Matrix-logarithm kernel: derivatives to second order, dense Hessian.
#[derive(Debug, Clone)]
pub struct LogmKernel {
    layout: ThetaLayout,
    pattern: PairPattern,
}

/// Per-thread scratch for [`LogmKernel`] evaluations.
#[derive(Debug, Clone)]
pub struct LogmWorkspace<T: Scalar> {
    theta: DMatrix<T>,
    /// Eigenvectors (columns) of `Theta`.
    u: DMatrix<T>,
    /// Eigenvalues of `Theta`, in solver order.
    gamma: DVector<T>,
    /// Residual `y - mu`.
    r: DVector<T>,
    /// Rotated residual `s = U' r`.
    s: DVector<T>,
    /// `exp(-gamma_j)`.
    eg: DVector<T>,
    /// First divided differences of `exp(-x)`: `h1t[j,k] = h1(gamma_j, gamma_k)`.
    h1t: DMatrix<T>,
    /// `F = U diag(s)` and its transpose.
    f: DMatrix<T>,
    ft: DMatrix<T>,
    /// `Pi = F Delta` with `Delta = -h1t`, and `Xi = Pi F'`.
    pi: DMatrix<T>,
    xi: DMatrix<T>,
    /// `htt[k,t] = h2(gamma_t, gamma_t, gamma_k)` for `k != t`, zero diagonal.
    htt: DMatrix<T>,
    /// `A = F htt`.
    amat: DMatrix<T>,
    /// Per-eigenvalue scratch for the K-tensor slices.
    mhat: DMatrix<T>,
    w1: DMatrix<T>,
    kj: DMatrix<T>,
    /// General `d x d` scratch.
    scr: DMatrix<T>,
    /// `d x n_offdiag` scratch for the (mean, off-diagonal) block.
    v13: DMatrix<T>,
    b13: DMatrix<T>,
    /// Relative tie threshold for this evaluation.
    thresh: T,
}

/// Flat index of Hessian slot `(j, k)`, `j <= k`, in the dense
/// upper-triangle, row-major order used by [`PairPattern::dense`].
#[inline]
fn slot(q: usize, j: usize, k: usize) -> usize {
    debug_assert!(j <= k && k < q);
    j * q - j * (j + 1) / 2 + k
}

/// First divided difference of `exp(-x)` with the confluent limit below
/// `thresh`: `h1(a, a) = -exp(-a)`.
fn h1_scalar<T: Scalar>(a: T, b: T, thresh: T) -> T {
    if (a - b).abs() < thresh {
        -((-(a + b) * T::of(0.5)).exp())
    } else {
        ((-a).exp() - (-b).exp()) / (a - b)
    }
}

impl LogmKernel {
    /// Build the kernel for response dimension `d`.
    pub fn new(d: usize) -> Result<Self> {
        let layout = ThetaLayout::new(d)?;
        let pattern = PairPattern::dense(layout.q);
        Ok(LogmKernel { layout, pattern })
    }

    /// Eigendecompose `Theta` for one row and fill the residual parts.
    fn prepare<T: Scalar>(&self, ws: &mut LogmWorkspace<T>, eta: &[T], y: &[T]) -> Result<()> {
        check_inputs(&self.layout, eta, y)?;
        let d = self.layout.d;
        for j in 0..d {
            ws.theta[(j, j)] = eta[d + j];
        }
        for m in 0..self.layout.n_offdiag() {
            let (wm, zm) = (self.layout.w[m], self.layout.z[m]);
            ws.theta[(wm, zm)] = eta[2 * d + m];
            ws.theta[(zm, wm)] = eta[2 * d + m];
        }
        let se = nalgebra::SymmetricEigen::try_new(ws.theta.clone(), T::default_epsilon(), 0)
            .ok_or(Error::EigenFailure { row: None })?;
        ws.u.copy_from(&se.eigenvectors);
        ws.gamma.copy_from(&se.eigenvalues);
        let cap = T::of(700.0);
        let mut max_abs = T::zero();
        for j in 0..d {
            let g = ws.gamma[j];
            if !g.is_finite() {
                return Err(Error::EigenFailure { row: None });
            }
            if g.abs() > cap {
                return Err(Error::ExpOverflow {
                    value: g.to_f64(),
                    row: None,
                });
            }
            max_abs = max_abs.max(g.abs());
        }
        ws.thresh = T::of(1e-8) * (T::one() + max_abs);
        for j in 0..d {
            ws.r[j] = y[j] - eta[j];
            ws.eg[j] = (-ws.gamma[j]).exp();
        }
        // s = U' r.
        for j in 0..d {
            let mut acc = T::zero();
            for i in 0..d {
                acc += ws.u[(i, j)] * ws.r[i];
            }
            ws.s[j] = acc;
        }
        Ok(())
    }

    /// Log-likelihood from the prepared eigen parts.
    fn loglik_core<T: Scalar>(ws: &LogmWorkspace<T>) -> T {
        let d = ws.gamma.len();
        let mut acc = T::zero();
        for j in 0..d {
            acc += ws.gamma[j] + ws.eg[j] * ws.s[j] * ws.s[j];
        }
        -T::of(0.5) * acc
    }

    /// Second divided difference of `exp(-x)` at three eigenvalues given by
    /// index, using the precomputed `h1` table on the well-separated path and
    /// confluent limits otherwise. Totally symmetric in its arguments.
    fn h2_eval<T: Scalar>(ws: &LogmWorkspace<T>, a: usize, b: usize, c: usize) -> T {
        let (mut i0, mut i1, mut i2) = (a, b, c);
        // Sort indices so gamma[i0] >= gamma[i1] >= gamma[i2].
        if ws.gamma[i0] < ws.gamma[i1] {
            std::mem::swap(&mut i0, &mut i1);
        }
        if ws.gamma[i1] < ws.gamma[i2] {
            std::mem::swap(&mut i1, &mut i2);
        }
        if ws.gamma[i0] < ws.gamma[i1] {
            std::mem::swap(&mut i0, &mut i1);
        }
        let (x, y, z) = (ws.gamma[i0], ws.gamma[i1], ws.gamma[i2]);
        let t = ws.thresh;
        let half = T::of(0.5);
        if x - z < t {
            // Fully confluent: f''(m)/2 at the mean.
            (-(x + y + z) / T::of(3.0)).exp() * half
        } else if x - y < t {
            let m = (x + y) * half;
            (-((-m).exp()) - h1_scalar(m, z, t)) / (m - z)
        } else if y - z < t {
            let m = (y + z) * half;
            (h1_scalar(x, m, t) + (-m).exp()) / (x - m)
        } else {
            (ws.h1t[(i0, i1)] - ws.h1t[(i1, i2)]) / (x - z)
        }
    }

    /// Gradient and optional Hessian from the prepared eigen parts. Kept
    /// separate from [`LogmKernel::prepare`] so tests can inject permuted or
    /// sign-flipped eigen systems directly.
    fn derivs_core<T: Scalar>(
        &self,
        ws: &mut LogmWorkspace<T>,
        grad: &mut [T],
        hess: Option<&mut [T]>,
    ) {
        let lay = &self.layout;
        let d = lay.d;
        let q = lay.q;
        let noff = lay.n_offdiag();
        let half = T::of(0.5);
        let one = T::one();
        let zero = T::zero();

        // h1 table; Delta = -h1t.
        for j in 0..d {
            for k in 0..d {
                ws.h1t[(j, k)] = if j == k {
                    -ws.eg[j]
                } else if (ws.gamma[j] - ws.gamma[k]).abs() < ws.thresh {
                    -((-(ws.gamma[j] + ws.gamma[k]) * half).exp())
                } else {
                    (ws.eg[j] - ws.eg[k]) / (ws.gamma[j] - ws.gamma[k])
                };
            }
        }
        // F = U diag(s); Pi = F Delta = -F h1t; Xi = Pi F'.
        for j in 0..d {
            for k in 0..d {
                ws.f[(j, k)] = ws.u[(j, k)] * ws.s[k];
                ws.ft[(k, j)] = ws.f[(j, k)];
            }
        }
        ws.pi.gemm(-one, &ws.f, &ws.h1t, zero);
        ws.xi.gemm(one, &ws.pi, &ws.ft, zero);

        // Gradient: means U (eg o s); diagonals Xi_kk/2 - 1/2; off-diagonals
        // Xi[z, w].
        for l in 0..d {
            let mut acc = zero;
            for j in 0..d {
                acc += ws.u[(l, j)] * ws.eg[j] * ws.s[j];
            }
            grad[l] = acc;
        }
        for k in 0..d {
            grad[d + k] = half * ws.xi[(k, k)] - half;
        }
        for m in 0..noff {
            grad[2 * d + m] = ws.xi[(lay.z[m], lay.w[m])];
        }

        let out = match hess {
            Some(out) => out,
            None => return,
        };
        out.fill(zero);

        // (mean, mean): -U diag(eg) U'. scr holds diag(eg) U'.
        for j in 0..d {
            for k in 0..d {
                ws.scr[(j, k)] = ws.eg[j] * ws.u[(k, j)];
            }
        }
        ws.w1.gemm(one, &ws.u, &ws.scr, zero);
        for l in 0..d {
            for m in l..d {
                out[slot(q, l, m)] = -ws.w1[(l, m)];
            }
        }
        // (mean, diag): -sum_j U[l,j] Pi[m,j] U[m,j]. Columns of scr hold
        // (Pi row m o U row m).
        for m in 0..d {
            for j in 0..d {
                ws.scr[(j, m)] = ws.pi[(m, j)] * ws.u[(m, j)];
            }
        }
        ws.w1.gemm(one, &ws.u, &ws.scr, zero);
        for l in 0..d {
            for m in 0..d {
                out[slot(q, l, d + m)] = -ws.w1[(l, m)];
            }
        }
        // (mean, lower): -sum_j U[l,j] (Pi[z,j] U[w,j] + Pi[w,j] U[z,j]).
        if noff > 0 {
            for m in 0..noff {
                let (wm, zm) = (lay.w[m], lay.z[m]);
                for j in 0..d {
                    ws.v13[(j, m)] =
                        ws.pi[(zm, j)] * ws.u[(wm, j)] + ws.pi[(wm, j)] * ws.u[(zm, j)];
                }
            }
            ws.b13.gemm(one, &ws.u, &ws.v13, zero);
            for l in 0..d {
                for m in 0..noff {
                    out[slot(q, l, 2 * d + m)] = -ws.b13[(l, m)];
                }
            }
        }

        // htt[k,t] = h2(gamma_t, gamma_t, gamma_k), zero diagonal; A = F htt.
        for t in 0..d {
            for k in 0..d {
                let v = if k == t {
                    zero
                } else {
                    Self::h2_eval(ws, t, t, k)
                };
                ws.htt[(k, t)] = v;
            }
        }
        ws.amat.gemm(one, &ws.f, &ws.htt, zero);

        // One pass per eigenvalue j builds the K-tensor slice
        //   K[r,s,j] = F[r,j] F[s,j] Delta[j,j]/2 + F[r,j] A[s,j]
        //            + F[s,j] A[r,j] + (F Mhat_j F')[r,s],
        //   Mhat_j[a,b] = h2(gamma_a, gamma_j, gamma_b) for a,b != j,
        // and immediately contracts it into the (diag, diag), (diag, lower),
        // and (lower, lower) blocks.
        for j in 0..d {
            for a in 0..d {
                for b in a..d {
                    let v = if a == j || b == j {
                        zero
                    } else {
                        Self::h2_eval(ws, a, j, b)
                    };
                    ws.mhat[(a, b)] = v;
                    ws.mhat[(b, a)] = v;
                }
            }
            ws.w1.gemm(one, &ws.f, &ws.mhat, zero);
            ws.kj.gemm(one, &ws.w1, &ws.ft, zero);
            let deljj = -ws.h1t[(j, j)];
            for rr in 0..d {
                let frj = ws.f[(rr, j)];
                for ss in 0..d {
                    ws.kj[(rr, ss)] += frj * ws.f[(ss, j)] * deljj * half
                        + frj * ws.amat[(ss, j)]
                        + ws.f[(ss, j)] * ws.amat[(rr, j)];
                }
            }
            // (diag, diag).
            for l in 0..d {
                let ulj = ws.u[(l, j)];
                for m in l..d {
                    out[slot(q, d + l, d + m)] -= ulj * ws.u[(m, j)] * ws.kj[(l, m)];
                }
            }
            // (diag, lower).
            for l in 0..d {
                let ulj = ws.u[(l, j)];
                for m in 0..noff {
                    let (wm, zm) = (lay.w[m], lay.z[m]);
                    out[slot(q, d + l, 2 * d + m)] -=
                        ulj * (ws.u[(wm, j)] * ws.kj[(l, zm)] + ws.u[(zm, j)] * ws.kj[(l, wm)]);
                }
            }
            // (lower, lower).
            for l in 0..noff {
                let (wl, zl) = (lay.w[l], lay.z[l]);
                let uwl = ws.u[(wl, j)];
                let uzl = ws.u[(zl, j)];
                for m in l..noff {
                    let (wm, zm) = (lay.w[m], lay.z[m]);
                    out[slot(q, 2 * d + l, 2 * d + m)] -= uwl
                        * (ws.u[(wm, j)] * ws.kj[(zl, zm)] + ws.u[(zm, j)] * ws.kj[(zl, wm)])
                        + uzl
                            * (ws.u[(wm, j)] * ws.kj[(wl, zm)] + ws.u[(zm, j)] * ws.kj[(wl, wm)]);
                }
            }
        }
    }
}

impl<T: Scalar> Kernel<T> for LogmKernel {
    type Workspace = LogmWorkspace<T>;

    fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    fn name(&self) -> &'static str {
        "logm"
    }

    fn pattern(&self) -> &PairPattern {
        &self.pattern
    }

    fn make_workspace(&self) -> LogmWorkspace<T> {
        let d = self.layout.d;
        let noff = self.layout.n_offdiag();
        LogmWorkspace {
            theta: DMatrix::zeros(d, d),
            u: DMatrix::zeros(d, d),
            gamma: DVector::zeros(d),
            r: DVector::zeros(d),
            s: DVector::zeros(d),
            eg: DVector::zeros(d),
            h1t: DMatrix::zeros(d, d),
            f: DMatrix::zeros(d, d),
            ft: DMatrix::zeros(d, d),
            pi: DMatrix::zeros(d, d),
            xi: DMatrix::zeros(d, d),
            htt: DMatrix::zeros(d, d),
            amat: DMatrix::zeros(d, d),
            mhat: DMatrix::zeros(d, d),
            w1: DMatrix::zeros(d, d),
            kj: DMatrix::zeros(d, d),
            scr: DMatrix::zeros(d, d),
            v13: DMatrix::zeros(d, noff.max(1)),
            b13: DMatrix::zeros(d, noff.max(1)),
            thresh: T::of(1e-8),
        }
    }

    fn loglik(&self, ws: &mut LogmWorkspace<T>, eta: &[T], y: &[T]) -> Result<T> {
        self.prepare(ws, eta, y)?;
        Ok(Self::loglik_core(ws))
    }

    fn eval(
        &self,
        ws: &mut LogmWorkspace<T>,
        eta: &[T],
        y: &[T],
        grad: &mut [T],
        hess: Option<&mut [T]>,
    ) -> Result<T> {
        self.prepare(ws, eta, y)?;
        if grad.len() != self.layout.q {
            return Err(Error::ShapeMismatch {
                what: "gradient buffer length",
                got: grad.len(),
                expected: self.layout.q,
            });
        }
        if let Some(ref out) = hess {
            if out.len() != self.pattern.len() {
                return Err(Error::ShapeMismatch {
                    what: "Hessian buffer length",
                    got: out.len(),
                    expected: self.pattern.len(),
                });
            }
        }
        self.derivs_core(ws, grad, hess);
        Ok(Self::loglik_core(ws))
    }

    fn triples(&self) -> Option<&[(u32, u32, u32)]> {
        None
    }

    fn third(&self, _ws: &mut LogmWorkspace<T>, _eta: &[T], _y: &[T], _out: &mut [T]) -> Result<()> {
        Err(Error::Unsupported(
            "third derivatives are not available for the matrix-logarithm parametrisation".into(),
        ))
    }

    fn sigma(&self, eta: &[T]) -> Result<DMatrix<T>> {
        let lay = &self.layout;
        if eta.len() != lay.q {
            return Err(Error::ShapeMismatch {
                what: "predictor row length",
                got: eta.len(),
                expected: lay.q,
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
        let theta = lay.theta_from_eta(eta)?;
        let se = nalgebra::SymmetricEigen::try_new(theta, T::default_epsilon(), 0)
            .ok_or(Error::EigenFailure { row: None })?;
        let d = lay.d;
        let cap = T::of(700.0);
        for j in 0..d {
            if se.eigenvalues[j].abs() > cap {
                return Err(Error::ExpOverflow {
                    value: se.eigenvalues[j].to_f64(),
                    row: None,
                });
            }
        }
        // Sigma = U exp(G) U'.
        let mut w = se.eigenvectors.clone();
        for j in 0..d {
            let e = se.eigenvalues[j].exp();
            for i in 0..d {
                w[(i, j)] *= e;
            }
        }
        Ok(&w * se.eigenvectors.transpose())
    }
}
