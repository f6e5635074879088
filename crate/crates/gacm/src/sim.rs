//! Synthetic data generators with known ground truth.
//!
//! Two families of generating processes are provided. Each returns the drawn
//! covariates and responses as a [`DataSet`], a [`ModelConfig`] describing
//! the model intended to fit them, and the true per-observation moments for
//! error measurement.
//!
//! Both generators use a counter-based RNG with one stream per purpose:
//! stream 0 produces the generating coefficients, stream `1000 + i` produces
//! the covariates and noise of observation `i`. Rows are therefore
//! independent of the total sample size: with the same seed, the first `n`
//! rows of a larger draw form exactly the smaller draw, so error curves over
//! growing `n` compare nested datasets from a single process.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::layout::{rvech_lower, ThetaLayout};
use crate::model::{DataSet, ModelConfig, TermConfig};
use crate::{Error, Result};

/// Which covariance parametrisation interprets the generated predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Mcd,
    Logm,
}

fn parse_param(name: &str) -> Result<Param> {
    match name {
        "mcd" => Ok(Param::Mcd),
        "logm" => Ok(Param::Logm),
        other => Err(Error::Config(format!(
            "unknown parametrisation '{other}' (expected 'mcd' or 'logm')"
        ))),
    }
}

/// True per-observation moments, and the predictor values that generated
/// them; row `i` matches row `i` of the returned data.
#[derive(Debug, Clone)]
pub struct TrueMoments {
    /// True predictor values, `n x q`.
    pub eta: DMatrix<f64>,
    /// True means, `n x d`.
    pub mu: DMatrix<f64>,
    /// True covariance matrices, `n x d(d+1)/2`: each row is the lower
    /// triangle (diagonal included) in row-wise order.
    pub sigma_rvech: DMatrix<f64>,
}

/// A generated dataset, the model configuration meant to fit it, and the
/// ground truth behind it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: DataSet<f64>,
    pub config: ModelConfig,
    pub truth: TrueMoments,
}

/// Probability rule for fixing covariance predictors to intercept-only in
/// [`sparse_linear`]: each covariance predictor is made constant
/// independently with probability `alpha(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityRule {
    /// `alpha = 1 - d^{-1/2}`.
    InverseSqrt,
    /// `alpha = 1 - 2/d`; requires `d >= 4`.
    TwoOverD,
}

impl SparsityRule {
    /// The probability that a covariance predictor is constant.
    pub fn alpha(self, d: usize) -> Result<f64> {
        match self {
            SparsityRule::InverseSqrt => Ok(1.0 - (d as f64).powf(-0.5)),
            SparsityRule::TwoOverD => {
                if d < 4 {
                    return Err(Error::Config(format!(
                        "sparsity rule 1 - 2/d needs d >= 4, got d = {d}"
                    )));
                }
                Ok(1.0 - 2.0 / d as f64)
            }
        }
    }
}

fn coefficient_rng(seed: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn observation_rng(seed: u64, i: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1000 + i as u64);
    rng
}

/// Lower-triangular `F` with `Sigma = F F^T` under the Cholesky-based
/// parametrisation: `F = T^{-1} D` with unit-lower `T` and
/// `D = diag(exp(eta_diag / 2))`.
fn mcd_factor(layout: &ThetaLayout, eta: &[f64]) -> Result<DMatrix<f64>> {
    let d = layout.d;
    let mut t = DMatrix::identity(d, d);
    for m in 0..layout.n_offdiag() {
        t[(layout.w[m], layout.z[m])] = eta[2 * d + m];
    }
    let mut f = DMatrix::zeros(d, d);
    for j in 0..d {
        f[(j, j)] = (0.5 * eta[d + j]).exp();
    }
    if !t.solve_lower_triangular_mut(&mut f) {
        return Err(Error::NotPositiveDefinite { row: None });
    }
    Ok(f)
}

/// Symmetric `F` with `Sigma = F F^T` under the matrix-logarithm
/// parametrisation: `F = U exp(Gamma / 2) U^T` from the eigendecomposition
/// `Theta = U Gamma U^T`.
fn logm_factor(layout: &ThetaLayout, eta: &[f64]) -> Result<DMatrix<f64>> {
    let theta = layout.theta_from_eta(eta)?;
    let eig = SymmetricEigen::try_new(theta, f64::EPSILON, 0)
        .ok_or(Error::EigenFailure { row: None })?;
    let mut scaled = eig.eigenvectors.clone();
    for (c, g) in eig.eigenvalues.iter().enumerate() {
        let mut col = scaled.column_mut(c);
        col *= (0.5 * g).exp();
    }
    Ok(scaled * eig.eigenvectors.transpose())
}

/// Draw covariates, evaluate the true predictors row by row, and sample
/// responses `y_i = mu_i + F_i eps_i` with `Sigma_i = F_i F_i^T`.
fn generate(
    d: usize,
    n: usize,
    n_cov: usize,
    param: Param,
    seed: u64,
    mut eta_row: impl FnMut(&[f64], &mut [f64]),
) -> Result<(DataSet<f64>, TrueMoments)> {
    let layout = ThetaLayout::new(d)?;
    let q = layout.q;
    let n_lower = d * (d + 1) / 2;
    let mut cov_cols = vec![Vec::with_capacity(n); n_cov];
    let mut y_cols = vec![Vec::with_capacity(n); d];
    let mut eta = DMatrix::zeros(n, q);
    let mut mu = DMatrix::zeros(n, d);
    let mut sigma_rvech = DMatrix::zeros(n, n_lower);
    let mut eta_buf = vec![0.0; q];
    for i in 0..n {
        let mut rng = observation_rng(seed, i);
        let x: Vec<f64> = (0..n_cov).map(|_| rng.random_range(0.0..1.0)).collect();
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        eta_row(&x, &mut eta_buf);
        let f = match param {
            Param::Mcd => mcd_factor(&layout, &eta_buf),
            Param::Logm => logm_factor(&layout, &eta_buf),
        }
        .map_err(|e| e.with_row(i))?;
        let noise = &f * &eps;
        for j in 0..d {
            mu[(i, j)] = eta_buf[j];
            y_cols[j].push(eta_buf[j] + noise[j]);
        }
        for (c, v) in eta_buf.iter().enumerate() {
            eta[(i, c)] = *v;
        }
        let sigma = &f * f.transpose();
        for (c, v) in rvech_lower(&sigma).into_iter().enumerate() {
            sigma_rvech[(i, c)] = v;
        }
        for (col, v) in cov_cols.iter_mut().zip(&x) {
            col.push(*v);
        }
    }
    let mut names: Vec<String> = (1..=n_cov).map(|k| format!("x{k}")).collect();
    names.extend((1..=d).map(|j| format!("y{j}")));
    let mut columns = cov_cols;
    columns.extend(y_cols);
    let data = DataSet::from_columns(names, columns)?;
    Ok((data, TrueMoments { eta, mu, sigma_rvech }))
}

/// Nonlinear three-covariate generating process.
///
/// Covariates `x1, x2, x3 ~ U(0, 1)`. Each mean predictor combines a sine
/// wave in `x1`, an exponential ramp in `x2`, and two polynomial bumps in
/// `x3`; each covariance predictor is an intercept plus phase-shifted
/// sine/cosine waves in `x1` and `x2`. All shape coefficients are drawn once
/// per seed (stream 0), so draws with the same seed share the same true
/// functions regardless of `n`.
///
/// The suggested configuration fits spline smooths of `x1, x2, x3` on the
/// means and of `x1, x2` on the covariance predictors, `k` basis functions
/// each.
pub fn smooth_trivariate(
    d: usize,
    n: usize,
    k: usize,
    parametrisation: &str,
    seed: u64,
) -> Result<Simulation> {
    let param = parse_param(parametrisation)?;
    ThetaLayout::new(d)?; // validate d early
    let n_cov_pred = d * (d + 1) / 2;
    let mut rng = coefficient_rng(seed);
    // Per mean predictor: sine amplitude, ramp rate, and the scale/width
    // coefficients of the two bumps.
    let mean_coef: Vec<[f64; 6]> = (0..d)
        .map(|_| {
            [
                rng.random_range(1.0..3.0),
                rng.random_range(1.0..3.0),
                rng.random_range(0.0..0.5),
                rng.random_range(9.0..11.0),
                rng.random_range(9.0..11.0),
                rng.random_range(9.0..11.0),
            ]
        })
        .collect();
    // Per covariance predictor (diagonal slots first, then the strict lower
    // triangle row by row): intercept, sine/cosine amplitudes and a phase in
    // x1, then sine/cosine amplitudes and a phase in x2.
    let cov_coef: Vec<[f64; 7]> = (0..n_cov_pred)
        .map(|_| {
            [
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.25..0.25),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            ]
        })
        .collect();
    let (data, truth) = generate(d, n, 3, param, seed, |x, eta| {
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        for (j, m) in mean_coef.iter().enumerate() {
            eta[j] = m[0] * (PI * x1).sin()
                + (m[1] * x2).exp()
                + m[2] * x3.powi(11) * (m[3] * (1.0 - x3)).powi(6)
                + m[4] * (m[5] * x3).powi(3) * (1.0 - x3).powi(10);
        }
        for (t, m) in cov_coef.iter().enumerate() {
            eta[d + t] = m[0]
                + m[1] * (TAU * (x1 + m[2])).sin()
                + m[3] * (TAU * (x1 + m[2])).cos()
                + m[4] * (TAU * (x2 + m[5])).sin()
                + m[6] * (TAU * (x2 + m[5])).cos();
        }
    })?;
    let spline = |c: &str| TermConfig {
        covariate: c.to_string(),
        k: Some(k),
        kind: None,
    };
    let config = ModelConfig {
        response: (1..=d).map(|j| format!("y{j}")).collect(),
        mean_terms: vec![spline("x1"), spline("x2"), spline("x3")],
        covariance_terms: vec![spline("x1"), spline("x2")],
        overrides: BTreeMap::new(),
        fixed: Vec::new(),
    };
    Ok(Simulation {
        data,
        config,
        truth,
    })
}

/// Linear ten-covariate generating process with random covariance sparsity.
///
/// Covariates `x1..x10 ~ U(0, 1)`. Mean predictors are linear in all ten
/// covariates; each covariance predictor has an intercept plus — unless it
/// is made constant, which happens independently with probability
/// `rule.alpha(d)` — linear effects of `x2..x10`. Coefficient scales: mean
/// slopes have standard deviation 0.5, covariance intercepts 0.2, and
/// covariance slopes 0.1, chosen so the generated matrices stay well
/// conditioned as `d` grows.
///
/// With `means_fixed`, mean predictors are identically zero and modelled as
/// intercept-only; the mean coefficients are still drawn (and discarded) so
/// the covariance side of the process is unchanged between the variants.
///
/// The suggested configuration uses linear terms matching the generating
/// process, listing constant covariance predictors in `fixed`.
pub fn sparse_linear(
    d: usize,
    n: usize,
    rule: SparsityRule,
    means_fixed: bool,
    parametrisation: &str,
    seed: u64,
) -> Result<Simulation> {
    const N_COV: usize = 10;
    const MEAN_SD: f64 = 0.5;
    const INTERCEPT_SD: f64 = 0.2;
    const SLOPE_SD: f64 = 0.1;
    let param = parse_param(parametrisation)?;
    ThetaLayout::new(d)?; // validate d early
    let alpha = rule.alpha(d)?;
    let n_cov_pred = d * (d + 1) / 2;
    let mut rng = coefficient_rng(seed);
    fn normal(rng: &mut ChaCha12Rng, sd: f64) -> f64 {
        sd * rng.sample::<f64, _>(StandardNormal)
    }
    let mut mean_beta = vec![[0.0; N_COV]; d];
    for b in &mut mean_beta {
        for v in b.iter_mut() {
            *v = normal(&mut rng, MEAN_SD);
        }
    }
    if means_fixed {
        mean_beta.iter_mut().for_each(|b| *b = [0.0; N_COV]);
    }
    // Per covariance predictor (diagonal slots first, then the strict lower
    // triangle row by row): intercept, slopes on x2..x10, constancy flag.
    let mut cov_intercept = vec![0.0; n_cov_pred];
    let mut cov_slope = vec![[0.0; N_COV - 1]; n_cov_pred];
    let mut constant = vec![false; n_cov_pred];
    for t in 0..n_cov_pred {
        cov_intercept[t] = normal(&mut rng, INTERCEPT_SD);
        for v in cov_slope[t].iter_mut() {
            *v = normal(&mut rng, SLOPE_SD);
        }
        constant[t] = rng.random_bool(alpha);
    }
    let (data, truth) = generate(d, n, N_COV, param, seed, |x, eta| {
        for (j, b) in mean_beta.iter().enumerate() {
            eta[j] = b.iter().zip(x).map(|(bk, xk)| bk * xk).sum();
        }
        for t in 0..n_cov_pred {
            let mut v = cov_intercept[t];
            if !constant[t] {
                for (b, xk) in cov_slope[t].iter().zip(&x[1..]) {
                    v += b * xk;
                }
            }
            eta[d + t] = v;
        }
    })?;
    let linear = |c: String| TermConfig {
        covariate: c,
        k: None,
        kind: Some("linear".to_string()),
    };
    let mean_terms = if means_fixed {
        Vec::new()
    } else {
        (1..=N_COV).map(|kk| linear(format!("x{kk}"))).collect()
    };
    let covariance_terms = (2..=N_COV).map(|kk| linear(format!("x{kk}"))).collect();
    let fixed = constant
        .iter()
        .enumerate()
        .filter(|&(_, c)| *c)
        .map(|(t, _)| d + t + 1)
        .collect();
    let config = ModelConfig {
        response: (1..=d).map(|j| format!("y{j}")).collect(),
        mean_terms,
        covariance_terms,
        overrides: BTreeMap::new(),
        fixed,
    };
    Ok(Simulation {
        data,
        config,
        truth,
    })
}
