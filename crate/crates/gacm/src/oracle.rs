//! Independent reference implementations used to validate the analytic
//! kernels and the fitting machinery: finite-difference differentiation of
//! arbitrary functions of the predictor vector, a dense Cholesky-based
//! Gaussian log-density, and a scaling-and-squaring matrix exponential.
//!
//! Nothing here shares code with the modules it checks, and none of it is
//! performance-sensitive.

use crate::{Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};

/// Per-coordinate step: `h * (1 + |eta_i|)`.
fn step<T: Scalar>(h: T, eta_i: T) -> T {
    h * (T::one() + eta_i.abs())
}

/// Central-difference gradient of `f` at `eta`.
pub fn fd_grad<T, F>(f: &F, eta: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    let mut out = Vec::with_capacity(eta.len());
    let mut x = eta.to_vec();
    for i in 0..eta.len() {
        let hi = step(h, eta[i]);
        x[i] = eta[i] + hi;
        let fp = f(&x)?;
        x[i] = eta[i] - hi;
        let fm = f(&x)?;
        x[i] = eta[i];
        out.push((fp - fm) / (hi + hi));
    }
    Ok(out)
}

/// One central-difference second derivative `d^2 f / (d eta_i d eta_j)`.
///
/// Uses the symmetric four-point stencil off the diagonal and the three-point
/// stencil on it.
pub fn fd_hess_entry<T, F>(f: &F, eta: &[T], h: T, i: usize, j: usize) -> Result<T>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    let mut x = eta.to_vec();
    let hi = step(h, eta[i]);
    if i == j {
        let f0 = f(&x)?;
        x[i] = eta[i] + hi;
        let fp = f(&x)?;
        x[i] = eta[i] - hi;
        let fm = f(&x)?;
        Ok((fp - f0 - f0 + fm) / (hi * hi))
    } else {
        let hj = step(h, eta[j]);
        let eval = |si: T, sj: T, x: &mut Vec<T>| -> Result<T> {
            x[i] = eta[i] + si * hi;
            x[j] = eta[j] + sj * hj;
            let v = f(x);
            x[i] = eta[i];
            x[j] = eta[j];
            v
        };
        let fpp = eval(T::one(), T::one(), &mut x)?;
        let fpm = eval(T::one(), -T::one(), &mut x)?;
        let fmp = eval(-T::one(), T::one(), &mut x)?;
        let fmm = eval(-T::one(), -T::one(), &mut x)?;
        let four = T::of(4.0);
        Ok((fpp - fpm - fmp + fmm) / (four * hi * hj))
    }
}

/// Full central-difference Hessian of `f` at `eta`.
pub fn fd_hess<T, F>(f: &F, eta: &[T], h: T) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    let q = eta.len();
    let mut out = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let v = fd_hess_entry(f, eta, h, i, j)?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// One central-difference third derivative `d^3 f / (d eta_i d eta_j d eta_k)`,
/// computed by differencing [`fd_hess_entry`] in coordinate `k`.
pub fn fd_third_entry<T, F>(f: &F, eta: &[T], h: T, i: usize, j: usize, k: usize) -> Result<T>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    let hk = step(h, eta[k]);
    let mut x = eta.to_vec();
    x[k] = eta[k] + hk;
    let hp = fd_hess_entry(f, &x, h, i, j)?;
    x[k] = eta[k] - hk;
    let hm = fd_hess_entry(f, &x, h, i, j)?;
    Ok((hp - hm) / (hk + hk))
}

/// Central difference, in coordinate `j`, of a vector-valued function with
/// the usual relative step `h (1 + |x_j|)`.
///
/// Differencing an exact analytic gradient (or Hessian) this way has an error
/// floor near `1e-9`, far below the `~1e-5` floor of differencing the scalar
/// objective twice, so derivative checks chain: gradient against differenced
/// log-likelihood, Hessian against differenced gradient, third derivatives
/// against differenced Hessian.
pub fn fd_vector_dir<T, F>(f: &F, x: &[T], h: T, j: usize) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<Vec<T>>,
{
    let hj = step(h, x[j]);
    let mut xp = x.to_vec();
    xp[j] = x[j] + hj;
    let mut xm = x.to_vec();
    xm[j] = x[j] - hj;
    let fp = f(&xp)?;
    let fm = f(&xm)?;
    Ok(fp
        .iter()
        .zip(&fm)
        .map(|(&a, &b)| (a - b) / (hj + hj))
        .collect())
}

/// Gaussian log-density (additive constant `-(d/2) log 2 pi` omitted, as
/// everywhere in this crate) evaluated through a dense Cholesky factorization
/// of `Sigma`. This is the reference the per-observation kernels are checked
/// against.
pub fn dense_loglik<T: Scalar>(
    mu: &DVector<T>,
    sigma: &DMatrix<T>,
    y: &DVector<T>,
) -> Result<T> {
    let d = mu.len();
    if sigma.nrows() != d || sigma.ncols() != d || y.len() != d {
        return Err(Error::ShapeMismatch {
            what: "dense log-likelihood dimensions",
            got: sigma.nrows(),
            expected: d,
        });
    }
    let chol = nalgebra::Cholesky::new(sigma.clone())
        .ok_or(Error::NotPositiveDefinite { row: None })?;
    let mut log_det = T::zero();
    for j in 0..d {
        log_det += chol.l_dirty()[(j, j)].ln();
    }
    log_det += log_det; // 2 * sum(log L_jj)
    let r = y - mu;
    let z = chol.solve(&r);
    let quad = r.dot(&z);
    let half = T::of(0.5);
    Ok(-half * (log_det + quad))
}

/// Matrix exponential by degree-13 Pade approximation with scaling and
/// squaring. Serves as the independent oracle for the matrix-logarithm
/// parametrisation's eigendecomposition route.
pub fn matrix_exp<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    const THETA_13: f64 = 5.371920351148152;

    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());

    // 1-norm (maximum absolute column sum) drives the scaling power.
    let mut norm1 = 0.0f64;
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += a[(i, j)].abs().to_f64();
        }
        norm1 = norm1.max(s);
    }
    let s_pow = if norm1 > THETA_13 {
        (norm1 / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let scale = T::of(0.5f64.powi(s_pow));
    let a = a * scale;

    let b: Vec<T> = B.iter().map(|&c| T::of(c)).collect();
    let eye = DMatrix::<T>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &eye * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &eye * b[0];

    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut exp = lhs
        .lu()
        .solve(&rhs)
        .expect("Pade denominator singular; input matrix is pathological");
    for _ in 0..s_pow {
        exp = &exp * &exp;
    }
    exp
}
