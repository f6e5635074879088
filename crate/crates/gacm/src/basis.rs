//! Penalized cubic B-spline bases for smooth additive terms.
//!
//! A term with basis dimension `k` uses an evenly spaced cubic B-spline basis
//! on the covariate's training range `[xmin, xmax]`, penalized by the squared
//! second differences of adjacent coefficients. The same knot construction is
//! used at training and prediction time (from the stored range), so fitted
//! values reproduce exactly.
//!
//! Identifiability of additive predictors is handled by sum-to-zero
//! centering: a Householder reflection sends the column-sum vector of the
//! design to a coordinate axis, the corresponding column is dropped, and the
//! reflection vector is stored so prediction applies the identical transform.

use crate::{Error, Result, Scalar};
use nalgebra::DMatrix;

/// Number of knots for `k` cubic basis functions.
#[inline]
fn n_knots(k: usize) -> usize {
    k + 4
}

/// Evenly spaced knot vector `t_i = xmin + (i - 3) h`, `i = 0..k+3`, with
/// `h = (xmax - xmin) / max(k - 3, 1)`. The domain `[xmin, xmax]` spans knots
/// `t_3..t_k`.
fn knot_vector<T: Scalar>(xmin: T, xmax: T, k: usize) -> Vec<T> {
    let denom = T::of(k.saturating_sub(3).max(1) as f64);
    let h = (xmax - xmin) / denom;
    (0..n_knots(k))
        .map(|i| xmin + (T::of(i as f64) - T::of(3.0)) * h)
        .collect()
}

/// The four non-zero cubic B-spline values at `x`, which must lie in span
/// `[t_span, t_span+1]`. Returns values for basis functions
/// `span-3 .. span` in order.
fn nonzero_values<T: Scalar>(knots: &[T], span: usize, x: T) -> [T; 4] {
    let mut vals = [T::zero(); 4];
    let mut left = [T::zero(); 4];
    let mut right = [T::zero(); 4];
    vals[0] = T::one();
    for deg in 1..=3 {
        left[deg] = x - knots[span + 1 - deg];
        right[deg] = knots[span + deg] - x;
        let mut saved = T::zero();
        for r in 0..deg {
            let tmp = vals[r] / (right[r + 1] + left[deg - r]);
            vals[r] = saved + right[r + 1] * tmp;
            saved = left[deg - r] * tmp;
        }
        vals[deg] = saved;
    }
    vals
}

/// Raw (uncentered) spline design matrix for covariate values `x` on the
/// range `[xmin, xmax]` with `k` basis functions. Values outside the range
/// are clamped to it; callers that must warn or reject detect that before
/// calling. Training and prediction both route through this function so the
/// two produce bit-identical rows for identical inputs.
pub fn spline_design_from_range<T: Scalar>(
    x: &[T],
    xmin: T,
    xmax: T,
    k: usize,
) -> Result<DMatrix<T>> {
    if k < 3 {
        return Err(Error::BasisTooSmall(k));
    }
    if !(xmax > xmin) {
        return Err(Error::Data(format!(
            "degenerate covariate range [{}, {}] for spline basis",
            xmin.to_f64(),
            xmax.to_f64()
        )));
    }
    let knots = knot_vector(xmin, xmax, k);
    let h = knots[4] - knots[3];
    let mut out = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        if !xi.is_finite() {
            return Err(Error::NonFinite {
                what: "covariate value",
                row: Some(i),
            });
        }
        let xc = xi.clamp(xmin, xmax);
        // Uniform knots: locate the span directly. Supported spans run from
        // knot index 3 to k - 1; clipping makes the top span right-closed.
        let raw = ((xc - xmin) / h).floor().to_f64() as isize;
        let span = (raw.max(0) as usize + 3).min(k - 1);
        let vals = nonzero_values(&knots, span, xc);
        for (offset, &v) in vals.iter().enumerate() {
            out[(i, span - 3 + offset)] = v;
        }
    }
    Ok(out)
}

/// Second-difference penalty `S = D' D` where `D` maps coefficients to their
/// second differences. `S` is `k x k`, positive semi-definite, rank `k - 2`,
/// and annihilates constant and linear coefficient sequences.
pub fn second_difference_penalty<T: Scalar>(k: usize) -> Result<DMatrix<T>> {
    if k < 3 {
        return Err(Error::BasisTooSmall(k));
    }
    let mut d = DMatrix::zeros(k - 2, k);
    for r in 0..k - 2 {
        d[(r, r)] = T::one();
        d[(r, r + 1)] = -T::of(2.0);
        d[(r, r + 2)] = T::one();
    }
    Ok(d.transpose() * &d)
}

/// Rank and log pseudo-determinant of a symmetric positive semi-definite
/// penalty block, from its eigenvalues with relative threshold
/// `1e-10 * max eigenvalue`.
pub fn penalty_rank_logpdet<T: Scalar>(s: &DMatrix<T>) -> Result<(usize, T)> {
    let se = nalgebra::SymmetricEigen::try_new(s.clone(), T::default_epsilon(), 0)
        .ok_or(Error::EigenFailure { row: None })?;
    let mut max_ev = T::zero();
    for &ev in se.eigenvalues.iter() {
        max_ev = max_ev.max(ev.abs());
    }
    if max_ev == T::zero() {
        return Ok((0, T::zero()));
    }
    let tol = T::of(1e-10) * max_ev;
    let mut rank = 0;
    let mut logpdet = T::zero();
    for &ev in se.eigenvalues.iter() {
        if ev > tol {
            rank += 1;
            logpdet += ev.ln();
        }
    }
    Ok((rank, logpdet))
}

/// Householder vector `v` sending the column-sum vector `c = B' 1` of a
/// design matrix to a multiple of the first coordinate axis. Stored with the
/// fitted model so prediction reapplies the identical centering.
pub fn centering_vector<T: Scalar>(b: &DMatrix<T>) -> Vec<T> {
    let k = b.ncols();
    let mut c = vec![T::zero(); k];
    for j in 0..k {
        let mut acc = T::zero();
        for i in 0..b.nrows() {
            acc += b[(i, j)];
        }
        c[j] = acc;
    }
    let norm = c.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if norm == T::zero() {
        // Degenerate (cannot occur for B-spline designs, whose entries are
        // non-negative with positive row sums): reflect about e0.
        c[0] = T::one();
        return c;
    }
    let sign = if c[0] >= T::zero() { T::one() } else { -T::one() };
    c[0] += sign * norm;
    c
}

/// Apply the stored centering: form `B H` with `H = I - 2 v v' / (v' v)` and
/// drop the first column. The result has column sums (numerically) zero when
/// `v` came from [`centering_vector`] on the same design.
pub fn apply_centering<T: Scalar>(b: &DMatrix<T>, v: &[T]) -> Result<DMatrix<T>> {
    let k = b.ncols();
    if v.len() != k {
        return Err(Error::ShapeMismatch {
            what: "centering vector length",
            got: v.len(),
            expected: k,
        });
    }
    let vtv = v.iter().fold(T::zero(), |a, &x| a + x * x);
    if vtv == T::zero() {
        return Err(Error::Data("zero centering vector".into()));
    }
    let beta = T::of(2.0) / vtv;
    let n = b.nrows();
    // bv = B v.
    let mut bv = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..k {
            acc += b[(i, j)] * v[j];
        }
        bv[i] = acc;
    }
    let mut out = DMatrix::zeros(n, k - 1);
    for j in 1..k {
        for i in 0..n {
            out[(i, j - 1)] = b[(i, j)] - beta * bv[i] * v[j];
        }
    }
    Ok(out)
}

/// Transform a penalty to the centered coordinates: `Z' S Z` where
/// `Z = H[:, 1..]` is the retained block of the Householder reflection.
pub fn center_penalty<T: Scalar>(s: &DMatrix<T>, v: &[T]) -> Result<DMatrix<T>> {
    let k = s.ncols();
    if v.len() != k {
        return Err(Error::ShapeMismatch {
            what: "centering vector length",
            got: v.len(),
            expected: k,
        });
    }
    let vtv = v.iter().fold(T::zero(), |a, &x| a + x * x);
    if vtv == T::zero() {
        return Err(Error::Data("zero centering vector".into()));
    }
    let beta = T::of(2.0) / vtv;
    // hs = H S = S - beta v (v' S); hsh = hs - beta (hs v) v'.
    let mut hs = s.clone();
    for j in 0..k {
        let mut vts_j = T::zero();
        for i in 0..k {
            vts_j += v[i] * s[(i, j)];
        }
        for i in 0..k {
            let delta = beta * v[i] * vts_j;
            hs[(i, j)] -= delta;
        }
    }
    let mut hsv = vec![T::zero(); k];
    for i in 0..k {
        let mut acc = T::zero();
        for j in 0..k {
            acc += hs[(i, j)] * v[j];
        }
        hsv[i] = acc;
    }
    let mut out = DMatrix::zeros(k - 1, k - 1);
    for i in 1..k {
        for j in 1..k {
            out[(i - 1, j - 1)] = hs[(i, j)] - beta * hsv[i] * v[j];
        }
    }
    // Symmetrize away rounding noise; the exact transform is symmetric.
    for i in 0..k - 1 {
        for j in i + 1..k - 1 {
            let m = (out[(i, j)] + out[(j, i)]) * T::of(0.5);
            out[(i, j)] = m;
            out[(j, i)] = m;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn partition_of_unity_inside_the_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &k in &[4usize, 5, 8, 10, 17] {
            let xs: Vec<f64> = (0..200)
                .map(|_| rng.random_range(-1.5f64..2.5))
                .chain([-1.5, 2.5].into_iter())
                .collect();
            let b = spline_design_from_range(&xs, -1.5, 2.5, k).unwrap();
            for i in 0..xs.len() {
                let sum: f64 = (0..k).map(|j| b[(i, j)]).sum();
                assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
                let nonzero = (0..k).filter(|&j| b[(i, j)] != 0.0).count();
                assert!(nonzero <= 4, "more than 4 active functions in a row");
            }
        }
    }

    #[test]
    fn out_of_range_values_clamp_to_the_boundary() {
        let b = spline_design_from_range(&[-10.0, 0.0, 10.0, 1.0], 0.0, 1.0, 6).unwrap();
        for j in 0..6 {
            assert_eq!(b[(0, j)], b[(1, j)]);
            assert_eq!(b[(2, j)], b[(3, j)]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            spline_design_from_range(&[0.5f64], 0.0, 1.0, 2),
            Err(Error::BasisTooSmall(2))
        ));
        assert!(spline_design_from_range(&[0.5f64], 1.0, 1.0, 5).is_err());
        assert!(spline_design_from_range(&[f64::NAN], 0.0, 1.0, 5).is_err());
    }

    #[test]
    fn penalty_annihilates_affine_sequences() {
        for &k in &[3usize, 5, 10] {
            let s = second_difference_penalty::<f64>(k).unwrap();
            for (a, b) in [(1.0, 0.0), (0.0, 1.0), (2.0, -3.0)] {
                for i in 0..k {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += s[(i, j)] * (a + b * j as f64);
                    }
                    assert!(acc.abs() < 1e-10, "S should annihilate affine coefficients");
                }
            }
        }
    }

    #[test]
    fn penalty_rank_is_k_minus_2() {
        for &k in &[3usize, 4, 7, 12] {
            let s = second_difference_penalty::<f64>(k).unwrap();
            let (rank, logpdet) = penalty_rank_logpdet(&s).unwrap();
            assert_eq!(rank, k - 2);
            assert!(logpdet.is_finite());
        }
    }

    #[test]
    fn logpdet_matches_positive_eigenvalue_product() {
        let s = second_difference_penalty::<f64>(6).unwrap();
        let (rank, logpdet) = penalty_rank_logpdet(&s).unwrap();
        let se = nalgebra::SymmetricEigen::new(s);
        let mut evs: Vec<f64> = se.eigenvalues.iter().copied().collect();
        evs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let direct: f64 = evs[..rank].iter().map(|v| v.ln()).sum();
        assert_relative_eq!(logpdet, direct, epsilon = 1e-10);
    }

    #[test]
    fn centering_zeroes_column_sums_and_is_reproducible() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..80).map(|_| rng.random_range(0.0f64..1.0)).collect();
        let b = spline_design_from_range(&xs, 0.0, 1.0, 9).unwrap();
        let v = centering_vector(&b);
        let bz = apply_centering(&b, &v).unwrap();
        assert_eq!(bz.ncols(), 8);
        for j in 0..bz.ncols() {
            let sum: f64 = (0..bz.nrows()).map(|i| bz[(i, j)]).sum();
            assert!(sum.abs() < 1e-10, "column {j} sum {sum} not centered");
        }
        // Same stored vector on a fresh design from the same inputs must give
        // bit-identical output.
        let b2 = spline_design_from_range(&xs, 0.0, 1.0, 9).unwrap();
        let bz2 = apply_centering(&b2, &v).unwrap();
        assert_eq!(bz, bz2);
    }

    #[test]
    fn centered_penalty_keeps_rank_k_minus_2() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let xs: Vec<f64> = (0..60).map(|_| rng.random_range(0.0f64..1.0)).collect();
        let b = spline_design_from_range(&xs, 0.0, 1.0, 10).unwrap();
        let v = centering_vector(&b);
        let s = second_difference_penalty::<f64>(10).unwrap();
        let sz = center_penalty(&s, &v).unwrap();
        assert_eq!(sz.ncols(), 9);
        // Symmetric by construction.
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(sz[(i, j)], sz[(j, i)]);
            }
        }
        let (rank, _) = penalty_rank_logpdet(&sz).unwrap();
        assert_eq!(rank, 8);
    }

    #[test]
    fn quadratic_form_is_preserved_by_centering() {
        // beta' Sz beta equals (Z beta)' S (Z beta) for the uncentered S:
        // check through a fitted-value identity instead. If g = B H w with
        // w0 = 0, then the penalty of the centered coefficients equals the
        // quadratic form of the mapped raw coefficients.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(0.0f64..1.0)).collect();
        let b = spline_design_from_range(&xs, 0.0, 1.0, 7).unwrap();
        let v = centering_vector(&b);
        let s = second_difference_penalty::<f64>(7).unwrap();
        let sz = center_penalty(&s, &v).unwrap();
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0f64..1.0)).collect();
        // Map centered coefficients back to raw ones: w = H [0, beta].
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        let full = {
            let mut w = vec![0.0; 7];
            w[1..].copy_from_slice(&beta);
            let vw: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            for j in 0..7 {
                w[j] -= 2.0 / vtv * vw * v[j];
            }
            w
        };
        let direct: f64 = (0..7)
            .map(|i| (0..7).map(|j| full[i] * s[(i, j)] * full[j]).sum::<f64>())
            .sum();
        let centered: f64 = (0..6)
            .map(|i| (0..6).map(|j| beta[i] * sz[(i, j)] * beta[j]).sum::<f64>())
            .sum();
        assert_relative_eq!(direct, centered, epsilon = 1e-10);
    }
}
