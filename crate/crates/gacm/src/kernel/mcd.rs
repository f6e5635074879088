//! Modified-Cholesky parametrisation.
//!
//! With `Theta` assembled from one predictor row (see
//! [`ThetaLayout`](crate::layout::ThetaLayout)), the precision matrix is
//! `Sigma^{-1} = T' D^{-2} T`, where `T` is unit lower triangular with
//! `T[w_m, z_m] = eta[2d + m]` and `D^2 = diag(exp(eta[d..2d]))` holds the
//! innovation variances. Writing `r = y - mu`, `u = T r`, and
//! `e_j = exp(-eta[d+j])`, the log-likelihood is
//!
//! ```text
//! l = -1/2 * sum_j ( eta[d+j] + e_j * u_j^2 )
//! ```
//!
//! All derivatives up to third order are closed-form polynomials in
//! `(e, u, r, T)`, and their structural sparsity depends only on `d`. The
//! Hessian pattern and third-derivative triple list are enumerated once at
//! construction; evaluation walks the same loops, so values and slots always
//! align.

use super::{check_inputs, Kernel, PairPattern};
use crate::layout::ThetaLayout;
use crate::{Error, Result, Scalar};
use nalgebra::DMatrix;

/// Number of Hessian block kinds: (mean,mean), (mean,diag), (mean,lower),
/// (diag,diag), (diag,lower), (lower,lower).
pub const HESS_BLOCKS: usize = 6;
/// Number of structurally nonzero third-derivative block kinds.
pub const THIRD_BLOCKS: usize = 8;

/// Modified-Cholesky kernel: derivatives to third order, sparse Hessian.
#[derive(Debug, Clone)]
pub struct McdKernel {
    layout: ThetaLayout,
    pattern: PairPattern,
    /// Evaluation-order index -> position in `pattern`.
    pair_slots: Vec<u32>,
    /// Sorted structurally nonzero triples `(i <= j <= k)`.
    triples: Vec<(u32, u32, u32)>,
    /// Evaluation-order index -> position in `triples`.
    triple_slots: Vec<u32>,
    hess_block_counts: [usize; HESS_BLOCKS],
    third_block_counts: [usize; THIRD_BLOCKS],
}

/// Per-thread scratch for [`McdKernel`] evaluations.
#[derive(Debug, Clone)]
pub struct McdWorkspace<T: Scalar> {
    /// Unit lower-triangular `T` (upper triangle stays zero).
    t: DMatrix<T>,
    /// Residual `y - mu`.
    r: Vec<T>,
    /// Standardized residual `u = T r`.
    u: Vec<T>,
    /// Inverse innovation variances `e_j = exp(-eta[d+j])`.
    e: Vec<T>,
}

/// Borrowed view of the quantities the derivative formulas consume.
struct Ctx<'a, T: Scalar> {
    t: &'a DMatrix<T>,
    r: &'a [T],
    u: &'a [T],
    e: &'a [T],
}

impl McdKernel {
    /// Build the kernel for response dimension `d`, enumerating its
    /// structural Hessian / third-derivative patterns.
    pub fn new(d: usize) -> Result<Self> {
        let layout = ThetaLayout::new(d)?;
        // Structural enumeration: run the scans with a throwaway numeric
        // context and record only the slots.
        let zt = DMatrix::<f64>::identity(d, d);
        let (zr, zu, ze) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let ctx = Ctx {
            t: &zt,
            r: &zr,
            u: &zu,
            e: &ze,
        };

        let mut raw_pairs: Vec<(u32, u32)> = Vec::new();
        let mut hess_block_counts = [0usize; HESS_BLOCKS];
        hess_scan(&layout, &ctx, |j, k, block, _v| {
            raw_pairs.push((j as u32, k as u32));
            hess_block_counts[block] += 1;
        });
        let (pairs, pair_slots) = sort_with_slots(raw_pairs);

        let mut raw_triples: Vec<(u32, u32, u32)> = Vec::new();
        let mut third_block_counts = [0usize; THIRD_BLOCKS];
        third_scan(&layout, &ctx, |i, j, k, block, _v| {
            raw_triples.push((i as u32, j as u32, k as u32));
            third_block_counts[block] += 1;
        });
        let (triples, triple_slots) = sort_with_slots(raw_triples);

        Ok(McdKernel {
            pattern: PairPattern::from_sorted(layout.q, pairs),
            layout,
            pair_slots,
            triples,
            triple_slots,
            hess_block_counts,
            third_block_counts,
        })
    }

    /// Enumerated Hessian slot count per block kind.
    pub fn hess_block_counts(&self) -> [usize; HESS_BLOCKS] {
        self.hess_block_counts
    }

    /// Enumerated third-derivative slot count per block kind.
    pub fn third_block_counts(&self) -> [usize; THIRD_BLOCKS] {
        self.third_block_counts
    }

    /// Fill the workspace for `(eta, y)` and return the log-likelihood.
    fn prepare<T: Scalar>(&self, ws: &mut McdWorkspace<T>, eta: &[T], y: &[T]) -> Result<T> {
        check_inputs(&self.layout, eta, y)?;
        let d = self.layout.d;
        let half = T::of(0.5);
        for m in 0..self.layout.n_offdiag() {
            ws.t[(self.layout.w[m], self.layout.z[m])] = eta[2 * d + m];
        }
        for j in 0..d {
            ws.r[j] = y[j] - eta[j];
            ws.e[j] = (-eta[d + j]).exp();
        }
        let mut ll = T::zero();
        for j in 0..d {
            let mut uj = ws.r[j];
            for c in 0..j {
                uj += ws.t[(j, c)] * ws.r[c];
            }
            ws.u[j] = uj;
            ll -= half * (eta[d + j] + ws.e[j] * uj * uj);
        }
        Ok(ll)
    }

    fn grad_into<T: Scalar>(&self, ws: &McdWorkspace<T>, grad: &mut [T]) {
        let d = self.layout.d;
        let half = T::of(0.5);
        // Mean slots: [T' (e o u)]_l, using the unit diagonal of T.
        for l in 0..d {
            let mut g = ws.e[l] * ws.u[l];
            for j in l + 1..d {
                g += ws.t[(j, l)] * ws.e[j] * ws.u[j];
            }
            grad[l] = g;
        }
        // Log-variance slots.
        for j in 0..d {
            grad[d + j] = half * ws.e[j] * ws.u[j] * ws.u[j] - half;
        }
        // Off-diagonal slots.
        for m in 0..self.layout.n_offdiag() {
            let (ww, zz) = (self.layout.w[m], self.layout.z[m]);
            grad[2 * d + m] = -(ws.e[ww] * ws.u[ww] * ws.r[zz]);
        }
    }
}

impl<T: Scalar> Kernel<T> for McdKernel {
    type Workspace = McdWorkspace<T>;

    fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    fn name(&self) -> &'static str {
        "mcd"
    }

    fn pattern(&self) -> &PairPattern {
        &self.pattern
    }

    fn make_workspace(&self) -> McdWorkspace<T> {
        let d = self.layout.d;
        McdWorkspace {
            t: DMatrix::identity(d, d),
            r: vec![T::zero(); d],
            u: vec![T::zero(); d],
            e: vec![T::zero(); d],
        }
    }

    fn loglik(&self, ws: &mut McdWorkspace<T>, eta: &[T], y: &[T]) -> Result<T> {
        self.prepare(ws, eta, y)
    }

    fn eval(
        &self,
        ws: &mut McdWorkspace<T>,
        eta: &[T],
        y: &[T],
        grad: &mut [T],
        hess: Option<&mut [T]>,
    ) -> Result<T> {
        let ll = self.prepare(ws, eta, y)?;
        if grad.len() != self.layout.q {
            return Err(Error::ShapeMismatch {
                what: "gradient buffer length",
                got: grad.len(),
                expected: self.layout.q,
            });
        }
        self.grad_into(ws, grad);
        if let Some(out) = hess {
            if out.len() != self.pattern.len() {
                return Err(Error::ShapeMismatch {
                    what: "Hessian buffer length",
                    got: out.len(),
                    expected: self.pattern.len(),
                });
            }
            let ctx = Ctx {
                t: &ws.t,
                r: &ws.r,
                u: &ws.u,
                e: &ws.e,
            };
            let mut counter = 0usize;
            hess_scan(&self.layout, &ctx, |_j, _k, _block, v| {
                out[self.pair_slots[counter] as usize] = v;
                counter += 1;
            });
            debug_assert_eq!(counter, self.pattern.len());
        }
        Ok(ll)
    }

    fn triples(&self) -> Option<&[(u32, u32, u32)]> {
        Some(&self.triples)
    }

    fn third(&self, ws: &mut McdWorkspace<T>, eta: &[T], y: &[T], out: &mut [T]) -> Result<()> {
        self.prepare(ws, eta, y)?;
        if out.len() != self.triples.len() {
            return Err(Error::ShapeMismatch {
                what: "third-derivative buffer length",
                got: out.len(),
                expected: self.triples.len(),
            });
        }
        let ctx = Ctx {
            t: &ws.t,
            r: &ws.r,
            u: &ws.u,
            e: &ws.e,
        };
        let mut counter = 0usize;
        third_scan(&self.layout, &ctx, |_i, _j, _k, _block, v| {
            out[self.triple_slots[counter] as usize] = v;
            counter += 1;
        });
        debug_assert_eq!(counter, self.triples.len());
        Ok(())
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
        let d = lay.d;
        let cap = T::of(700.0);
        for j in 0..d {
            let v = eta[d + j];
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "predictor row",
                    row: None,
                });
            }
            if v.abs() > cap {
                return Err(Error::ExpOverflow {
                    value: v.to_f64(),
                    row: None,
                });
            }
        }
        let mut t = DMatrix::<T>::identity(d, d);
        for m in 0..lay.n_offdiag() {
            t[(lay.w[m], lay.z[m])] = eta[2 * d + m];
        }
        // X = T^{-1} D with D = diag(exp(eta[d+j] / 2)), by forward
        // substitution column by column; then Sigma = X X'.
        let half = T::of(0.5);
        let mut x = DMatrix::<T>::zeros(d, d);
        for c in 0..d {
            x[(c, c)] = (eta[d + c] * half).exp();
            for i in c + 1..d {
                let mut s = T::zero();
                for k in c..i {
                    s += t[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = -s;
            }
        }
        Ok(&x * x.transpose())
    }
}

/// Stable argsort: returns the sorted keys plus, for each original position,
/// its rank in the sorted order.
fn sort_with_slots<K: Ord + Copy>(raw: Vec<K>) -> (Vec<K>, Vec<u32>) {
    let mut order: Vec<u32> = (0..raw.len() as u32).collect();
    order.sort_by_key(|&i| raw[i as usize]);
    let mut sorted = Vec::with_capacity(raw.len());
    let mut slots = vec![0u32; raw.len()];
    for (rank, &i) in order.iter().enumerate() {
        sorted.push(raw[i as usize]);
        slots[i as usize] = rank as u32;
    }
    (sorted, slots)
}

/// Walk every structurally nonzero Hessian slot `(j <= k)` in a fixed order,
/// reporting `(j, k, block_kind, value)`. Pattern construction and evaluation
/// share this single enumeration, so slot order can never drift between them.
fn hess_scan<T: Scalar>(
    lay: &ThetaLayout,
    cx: &Ctx<'_, T>,
    mut emit: impl FnMut(usize, usize, usize, T),
) {
    let d = lay.d;
    let half = T::of(0.5);
    // (mean l, mean m), all l <= m: -sum_{j >= m} e_j T[j,l] T[j,m].
    for l in 0..d {
        for m in l..d {
            let mut s = T::zero();
            for j in m..d {
                s += cx.e[j] * cx.t[(j, l)] * cx.t[(j, m)];
            }
            emit(l, m, 0, -s);
        }
    }
    // (mean l, diag m), m >= l: -e_m (u_l 1{m=l} + u_m T[m,l] 1{m>l}).
    for l in 0..d {
        for m in l..d {
            let v = if m == l {
                cx.u[l]
            } else {
                cx.u[m] * cx.t[(m, l)]
            };
            emit(l, d + m, 1, -(cx.e[m] * v));
        }
    }
    // (mean l, lower m), l <= w_m:
    //   e_w ( r_z (1{w=l} + T[w,l] 1{w>l}) + u_w 1{z=l} ).
    for m in 0..lay.n_offdiag() {
        let (ww, zz) = (lay.w[m], lay.z[m]);
        for l in 0..=ww {
            let mut v = if ww == l {
                cx.r[zz]
            } else {
                cx.r[zz] * cx.t[(ww, l)]
            };
            if zz == l {
                v += cx.u[ww];
            }
            emit(l, 2 * d + m, 2, cx.e[ww] * v);
        }
    }
    // (diag l, diag l): -1/2 e_l u_l^2 (diagonal only).
    for l in 0..d {
        emit(d + l, d + l, 3, -(half * cx.e[l] * cx.u[l] * cx.u[l]));
    }
    // (diag l, lower m), l = w_m: e_l u_l r_z.
    for m in 0..lay.n_offdiag() {
        let (ww, zz) = (lay.w[m], lay.z[m]);
        emit(d + ww, 2 * d + m, 4, cx.e[ww] * cx.u[ww] * cx.r[zz]);
    }
    // (lower l, lower m), w_l = w_m: -e_w r_{z_l} r_{z_m}. Slots sharing a
    // row of T are contiguous, so enumerate row by row.
    for ww in 1..d {
        let base = ww * (ww - 1) / 2;
        for a in 0..ww {
            for b in a..ww {
                emit(
                    2 * d + base + a,
                    2 * d + base + b,
                    5,
                    -(cx.e[ww] * cx.r[a] * cx.r[b]),
                );
            }
        }
    }
}

/// Walk every structurally nonzero third-derivative slot `(i <= j <= k)` in a
/// fixed order, reporting `(i, j, k, block_kind, value)`. Blocks with two or
/// three mean indices and no others, or three off-diagonal indices spanning
/// different rows of `T`, vanish identically and are never emitted.
fn third_scan<T: Scalar>(
    lay: &ThetaLayout,
    cx: &Ctx<'_, T>,
    mut emit: impl FnMut(usize, usize, usize, usize, T),
) {
    let d = lay.d;
    let nof = lay.n_offdiag();
    let half = T::of(0.5);
    let two = T::of(2.0);
    // (mean k, mean l, diag m), k <= l <= m:
    //   e_m ( 1{k=l=m} + T[m,k] 1{l=m, l>k} + T[m,k] T[m,l] 1{m>l} ).
    for k in 0..d {
        for l in k..d {
            for mv in l..d {
                let mut v = T::zero();
                if k == l && l == mv {
                    v += T::one();
                }
                if l == mv && l > k {
                    v += cx.t[(mv, k)];
                }
                if mv > l {
                    v += cx.t[(mv, k)] * cx.t[(mv, l)];
                }
                emit(k, l, d + mv, 0, cx.e[mv] * v);
            }
        }
    }
    // (mean k, mean l, lower m): -e_w * v with
    //   v = 1{k=z, l=w} + 2 T[w,z] 1{k=l=z} + T[w,l] 1{k=z, z<l<w}
    //       + T[w,k] 1{l=z, k<z}.
    for m in 0..nof {
        let (ww, zz) = (lay.w[m], lay.z[m]);
        for l in zz..=ww {
            // k = z branch.
            let mut v = T::zero();
            if l == ww {
                v += T::one();
            }
            if l == zz {
                v += two * cx.t[(ww, zz)];
            }
            if l != zz && l < ww {
                v += cx.t[(ww, l)];
            }
            emit(zz, l, 2 * d + m, 1, -(cx.e[ww] * v));
        }
        for k in 0..zz {
            // l = z branch.
            emit(k, zz, 2 * d + m, 1, -(cx.e[ww] * cx.t[(ww, k)]));
        }
    }
    // (mean k, diag l, diag l), l >= k: e_l (u_k 1{k=l} + u_l T[l,k] 1{l>k}).
    for k in 0..d {
        for lv in k..d {
            let v = if lv == k {
                cx.u[k]
            } else {
                cx.u[lv] * cx.t[(lv, k)]
            };
            emit(k, d + lv, d + lv, 2, cx.e[lv] * v);
        }
    }
    // (mean k, diag w_m, lower m), k <= w_m:
    //   -e_w ( r_z (1{w=k} + T[w,k] 1{w>k}) + u_w 1{k=z} ).
    for m in 0..nof {
        let (ww, zz) = (lay.w[m], lay.z[m]);
        for k in 0..=ww {
            let mut v = if ww == k {
                cx.r[zz]
            } else {
                cx.r[zz] * cx.t[(ww, k)]
            };
            if k == zz {
                v += cx.u[ww];
            }
            emit(k, d + ww, 2 * d + m, 3, -(cx.e[ww] * v));
        }
    }
    // (mean k, lower l, lower m), l <= m, w_l = w_m, k in {z_l, z_m}:
    //   e_w ( r_{z_m} 1{z_l=k} + r_{z_l} 1{z_m=k} ).
    for ww in 1..d {
        let base = ww * (ww - 1) / 2;
        for a in 0..ww {
            for b in a..ww {
                let (l, m) = (base + a, base + b);
                if a == b {
                    emit(a, 2 * d + l, 2 * d + m, 4, cx.e[ww] * (cx.r[a] + cx.r[a]));
                } else {
                    emit(a, 2 * d + l, 2 * d + m, 4, cx.e[ww] * cx.r[b]);
                    emit(b, 2 * d + l, 2 * d + m, 4, cx.e[ww] * cx.r[a]);
                }
            }
        }
    }
    // (diag k, diag k, diag k): 1/2 e_k u_k^2.
    for kv in 0..d {
        emit(d + kv, d + kv, d + kv, 5, half * cx.e[kv] * cx.u[kv] * cx.u[kv]);
    }
    // (diag w_m, diag w_m, lower m): -e_w u_w r_z.
    for m in 0..nof {
        let (ww, zz) = (lay.w[m], lay.z[m]);
        emit(d + ww, d + ww, 2 * d + m, 6, -(cx.e[ww] * cx.u[ww] * cx.r[zz]));
    }
    // (diag w, lower l, lower m), l <= m, w_l = w_m = w: e_w r_{z_l} r_{z_m}.
    for ww in 1..d {
        let base = ww * (ww - 1) / 2;
        for a in 0..ww {
            for b in a..ww {
                emit(
                    d + ww,
                    2 * d + base + a,
                    2 * d + base + b,
                    7,
                    cx.e[ww] * cx.r[a] * cx.r[b],
                );
            }
        }
    }
}

/// Closed-form structural Hessian slot counts per block kind, in the same
/// order as [`McdKernel::hess_block_counts`].
pub fn hess_block_counts_closed(d: usize) -> [usize; HESS_BLOCKS] {
    [
        d * (d + 1) / 2,
        d * (d + 1) / 2,
        d * (d - 1) + d * (d - 1) * (d.saturating_sub(2)) / 3,
        d,
        d * (d - 1) / 2,
        (d + 1) * d * (d - 1) / 6,
    ]
}

/// Closed-form total structural Hessian slot count.
pub fn hess_total_closed(d: usize) -> usize {
    d * ((d * d + 15 * d + 2) + 2 * (d.saturating_sub(1)) * (d.saturating_sub(2))) / 6
}

/// Closed-form structural third-derivative slot counts per block kind, in the
/// same order as [`McdKernel::third_block_counts`].
pub fn third_block_counts_closed(d: usize) -> [usize; THIRD_BLOCKS] {
    [
        d * (d + 1) * (d + 2) / 6,
        (d - 1) * d * (d + 1) / 3,
        d * (d + 1) / 2,
        (d - 1) * d * (d + 1) / 3,
        (d - 1) * d * (2 * d - 1) / 6,
        d,
        d * (d - 1) / 2,
        d * (d + 1) * (d - 1) / 6,
    ]
}

/// Closed-form total structural third-derivative slot count.
pub fn third_total_closed(d: usize) -> usize {
    d * (4 * d * d + 3 * d + 2) / 3
}
