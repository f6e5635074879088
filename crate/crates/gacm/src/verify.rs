//! Fast self-checks spanning the major components, backing the `verify`
//! command.
//!
//! Checks are grouped into named suites (`derivs`, `sparsity`, `blocks`,
//! `laml`, and `all` for the union). Each check returns a one-line detail
//! string on success or the first failure as an error. The default battery
//! is sized to finish in seconds; the heavyweight acceptance suite lives in
//! the integration tests.

use std::collections::HashMap;

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::accum::{accumulate, plan_blocks, Accumulated, Path, Plan};
use crate::fit::{evidence_at, fit, smoothing_terms, FitOptions, Method};
use crate::kernel::{
    hess_block_counts_closed, hess_total_closed, third_block_counts_closed, third_total_closed,
    Kernel, LogmKernel, McdKernel,
};
use crate::model::{ModelArtifact, ModelSpec};
use crate::sim;
use crate::{oracle, Error, Result};

/// One named self-check.
pub struct Check {
    pub name: String,
    pub run: Box<dyn Fn() -> Result<String> + Send + Sync>,
}

impl Check {
    fn new(
        name: impl Into<String>,
        run: impl Fn() -> Result<String> + Send + Sync + 'static,
    ) -> Self {
        Check {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

/// Build a suite of checks. `d` sets the response dimension of the
/// derivative checks; `scale` multiplies the row counts of the data-driven
/// checks. Valid names: `derivs`, `sparsity`, `blocks`, `laml`, `all`.
pub fn suite(name: &str, d: usize, scale: f64) -> Result<Vec<Check>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!(
            "scale must be a positive number, got {scale}"
        )));
    }
    if d < 1 {
        return Err(Error::InvalidDimension(d));
    }
    let rows = move |base: usize| ((base as f64 * scale).ceil() as usize).max(8);
    let mut out = Vec::new();
    let mut unknown = true;
    if matches!(name, "sparsity" | "all") {
        unknown = false;
        out.push(Check::new(
            "derivative cardinalities match closed forms",
            cardinalities,
        ));
    }
    if matches!(name, "derivs" | "all") {
        unknown = false;
        out.push(Check::new(
            format!("kernel derivatives match finite differences (d={d})"),
            move || kernel_derivatives(d),
        ));
        let n = rows(1000);
        out.push(Check::new(
            format!("log-determinant identities hold (d={d}, {n} rows)"),
            move || logdet_identities(d, n),
        ));
    }
    if matches!(name, "blocks" | "all") {
        unknown = false;
        let n = rows(160);
        out.push(Check::new(
            format!("accumulation paths agree ({n} rows)"),
            move || accumulation_paths(n),
        ));
    }
    if matches!(name, "laml" | "all") {
        unknown = false;
        let n = rows(120);
        out.push(Check::new(
            format!("evidence gradient matches finite differences ({n} rows)"),
            move || evidence_gradient(n),
        ));
        let n = rows(300);
        out.push(Check::new(
            format!("fit converges and model file round-trips ({n} rows)"),
            move || fit_and_artifact(n),
        ));
    }
    if unknown {
        return Err(Error::Config(format!(
            "unknown suite '{name}' (expected derivs, sparsity, blocks, laml, or all)"
        )));
    }
    Ok(out)
}

fn max_abs<'a>(vals: impl Iterator<Item = &'a f64>) -> f64 {
    vals.fold(0.0f64, |a, b| a.max(b.abs()))
}

/// One random, well-conditioned instance: predictors in a moderate range,
/// responses a couple of standard deviations wide.
fn random_instance(rng: &mut ChaCha12Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let q = d + d * (d + 1) / 2;
    let eta: Vec<f64> = (0..q)
        .map(|j| {
            if j < 2 * d {
                rng.random_range(-1.0..1.0)
            } else {
                rng.random_range(-0.8..0.8)
            }
        })
        .collect();
    let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    (eta, y)
}

/// Gradient against finite differences of the log-likelihood, and the
/// Hessian against finite differences of the analytic gradient. Returns the
/// two worst absolute errors.
fn derivative_errors<K: Kernel<f64>>(kernel: &K, eta: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let q = kernel.q();
    let pat = kernel.pattern();
    let mut ws = kernel.make_workspace();
    let mut grad = vec![0.0; q];
    let mut hess = vec![0.0; pat.len()];
    kernel.eval(&mut ws, eta, y, &mut grad, Some(&mut hess))?;

    let f = |e: &[f64]| {
        let mut w = kernel.make_workspace();
        kernel.loglik(&mut w, e, y)
    };
    let fd = oracle::fd_grad(&f, eta, 1e-6)?;
    let gtol = 1e-7 * (1.0 + max_abs(grad.iter()));
    let gerr = grad
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if gerr > gtol {
        return Err(Error::Data(format!(
            "{}: gradient error {gerr:e} exceeds {gtol:e}",
            kernel.name()
        )));
    }

    let gf = |e: &[f64]| -> Result<Vec<f64>> {
        let mut w = kernel.make_workspace();
        let mut g = vec![0.0; q];
        kernel.eval(&mut w, e, y, &mut g, None)?;
        Ok(g)
    };
    let htol = 1e-6 * (1.0 + max_abs(hess.iter()));
    let mut herr = 0.0f64;
    for j in 0..q {
        let col = oracle::fd_vector_dir(&gf, eta, 1e-5, j)?;
        for (k, fd_jk) in col.iter().enumerate() {
            // Entries outside the sparsity pattern are structural zeros.
            let expect = pat
                .position(j.min(k), j.max(k))
                .map(|p| hess[p])
                .unwrap_or(0.0);
            herr = herr.max((fd_jk - expect).abs());
        }
    }
    if herr > htol {
        return Err(Error::Data(format!(
            "{}: Hessian error {herr:e} exceeds {htol:e}",
            kernel.name()
        )));
    }
    Ok((gerr, herr))
}

/// Third derivatives against finite differences of the analytic Hessian.
fn third_errors<K: Kernel<f64>>(kernel: &K, eta: &[f64], y: &[f64]) -> Result<f64> {
    let Some(triples) = kernel.triples() else {
        return Ok(0.0);
    };
    let q = kernel.q();
    let pat = kernel.pattern();
    let mut ws = kernel.make_workspace();
    let mut third = vec![0.0; triples.len()];
    kernel.third(&mut ws, eta, y, &mut third)?;
    let by_triple: HashMap<(u32, u32, u32), usize> =
        triples.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let hf = |e: &[f64]| -> Result<Vec<f64>> {
        let mut w = kernel.make_workspace();
        let mut g = vec![0.0; q];
        let mut h = vec![0.0; pat.len()];
        kernel.eval(&mut w, e, y, &mut g, Some(&mut h))?;
        Ok(h)
    };
    let ttol = 1e-5 * (1.0 + max_abs(third.iter()));
    let mut terr = 0.0f64;
    for l in 0..q {
        let dh = oracle::fd_vector_dir(&hf, eta, 1e-5, l)?;
        for (p, &(a, b)) in pat.pairs().iter().enumerate() {
            let mut key = [a, b, l as u32];
            key.sort_unstable();
            let expect = by_triple
                .get(&(key[0], key[1], key[2]))
                .map(|&i| third[i])
                .unwrap_or(0.0);
            terr = terr.max((dh[p] - expect).abs());
        }
    }
    if terr > ttol {
        return Err(Error::Data(format!(
            "{}: third-derivative error {terr:e} exceeds {ttol:e}",
            kernel.name()
        )));
    }
    Ok(terr)
}

fn kernel_derivatives(d: usize) -> Result<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let (eta, y) = random_instance(&mut rng, d);
    let mcd = McdKernel::new(d)?;
    let (mg, mh) = derivative_errors(&mcd, &eta, &y)?;
    let mt = third_errors(&mcd, &eta, &y)?;
    let logm = LogmKernel::new(d)?;
    let (lg, lh) = derivative_errors(&logm, &eta, &y)?;
    Ok(format!(
        "mcd grad {mg:.1e} hess {mh:.1e} third {mt:.1e}; logm grad {lg:.1e} hess {lh:.1e}"
    ))
}

fn cardinalities() -> Result<String> {
    for d in 1..=30 {
        let q = d + d * (d + 1) / 2;
        let mcd = McdKernel::new(d)?;
        let pat_len = Kernel::<f64>::pattern(&mcd).len();
        if pat_len != hess_total_closed(d) {
            return Err(Error::Data(format!(
                "mcd d={d}: {pat_len} Hessian entries, expected {}",
                hess_total_closed(d)
            )));
        }
        if mcd.hess_block_counts() != hess_block_counts_closed(d) {
            return Err(Error::Data(format!("mcd d={d}: Hessian block counts off")));
        }
        let triples = Kernel::<f64>::triples(&mcd)
            .ok_or_else(|| Error::Data("mcd must provide third derivatives".into()))?;
        if triples.len() != third_total_closed(d) {
            return Err(Error::Data(format!(
                "mcd d={d}: {} third entries, expected {}",
                triples.len(),
                third_total_closed(d)
            )));
        }
        if mcd.third_block_counts() != third_block_counts_closed(d) {
            return Err(Error::Data(format!("mcd d={d}: third block counts off")));
        }
        let logm = LogmKernel::new(d)?;
        let dense = q * (q + 1) / 2;
        let got = Kernel::<f64>::pattern(&logm).len();
        if got != dense {
            return Err(Error::Data(format!(
                "logm d={d}: {got} Hessian entries, expected dense {dense}"
            )));
        }
    }
    Ok("d = 1..30 for both parametrisations".into())
}

fn logdet_identities(d: usize, rows: usize) -> Result<String> {
    let mcd = McdKernel::new(d)?;
    let logm = LogmKernel::new(d)?;
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..rows {
        let (eta, _) = random_instance(&mut rng, d);
        // log|Sigma| equals the sum of the diagonal predictors under both
        // parametrisations.
        let expect: f64 = (0..d).map(|j| eta[d + j]).sum();
        for sigma in [
            Kernel::<f64>::sigma(&mcd, &eta)?,
            Kernel::<f64>::sigma(&logm, &eta)?,
        ] {
            let chol = Cholesky::new(sigma).ok_or(Error::NotPositiveDefinite { row: None })?;
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            worst = worst.max((logdet - expect).abs() / (1.0 + expect.abs()));
        }
    }
    if worst > 1e-10 {
        return Err(Error::Data(format!(
            "log-determinant identity violated: {worst:e}"
        )));
    }
    // With a single response the two parametrisations are the same model.
    let mcd1 = McdKernel::new(1)?;
    let logm1 = LogmKernel::new(1)?;
    let mut ws_m = Kernel::<f64>::make_workspace(&mcd1);
    let mut ws_l = Kernel::<f64>::make_workspace(&logm1);
    let mut worst1 = 0.0f64;
    for _ in 0..100 {
        let (eta, y) = random_instance(&mut rng, 1);
        let a = mcd1.loglik(&mut ws_m, &eta, &y)?;
        let b = logm1.loglik(&mut ws_l, &eta, &y)?;
        worst1 = worst1.max((a - b).abs() / (1.0 + a.abs()));
    }
    if worst1 > 1e-12 {
        return Err(Error::Data(format!(
            "d=1 parametrisations disagree: {worst1:e}"
        )));
    }
    Ok(format!("worst {worst:.1e}, d=1 agreement {worst1:.1e}"))
}

fn sup_diff(a: &Accumulated<f64>, b: &Accumulated<f64>) -> f64 {
    let mut worst = (a.loglik - b.loglik).abs() / (1.0 + a.loglik.abs());
    worst = worst.max(
        a.grad
            .iter()
            .zip(b.grad.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / (1.0 + max_abs(a.grad.iter())),
    );
    worst = worst.max(
        a.hess
            .iter()
            .zip(b.hess.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / (1.0 + max_abs(a.hess.iter())),
    );
    worst
}

fn accumulation_paths(n: usize) -> Result<String> {
    let sim = sim::smooth_trivariate(2, n, 5, "mcd", 23)?;
    let spec = ModelSpec::<f64>::assemble(&sim.config, &sim.data)?;
    let kernel = McdKernel::new(2)?;
    let mut beta = spec.beta_init()?;
    for (i, b) in beta.iter_mut().enumerate() {
        *b += 0.01 * (i as f64).sin();
    }
    let mut eta = vec![0.0; spec.n() * spec.layout.q];
    spec.eta_into(&beta, &mut eta)?;
    let pattern = Kernel::<f64>::pattern(&kernel);
    let budget = 1usize << 30;
    let standard = accumulate(&spec, &kernel, &eta, &Plan::single(&spec, &kernel)?)?;
    let blocked = accumulate(
        &spec,
        &kernel,
        &eta,
        &plan_blocks(&spec, pattern, budget, Path::Standard, Some(3))?,
    )?;
    let parsim = accumulate(
        &spec,
        &kernel,
        &eta,
        &plan_blocks(&spec, pattern, budget, Path::Parsimonious, Some(4))?,
    )?;
    let w1 = sup_diff(&standard, &blocked);
    let w2 = sup_diff(&standard, &parsim);
    let worst = w1.max(w2);
    if worst > 1e-12 {
        return Err(Error::Data(format!(
            "accumulation paths disagree: blocked {w1:e}, parsimonious {w2:e}"
        )));
    }
    Ok(format!(
        "standard vs blocked {w1:.1e}, vs parsimonious {w2:.1e}"
    ))
}

fn evidence_gradient(n: usize) -> Result<String> {
    let sim = sim::smooth_trivariate(2, n, 5, "mcd", 31)?;
    let spec = ModelSpec::<f64>::assemble(&sim.config, &sim.data)?;
    let kernel = McdKernel::new(2)?;
    let plan = Plan::single(&spec, &kernel)?;
    let opts = FitOptions {
        method: Method::Efs,
        ..FitOptions::default()
    };
    let n_pen = spec.penalties.len();
    let lambda = vec![1.5; n_pen];
    let beta0 = DVector::from_column_slice(&spec.beta_init()?);
    let ev = evidence_at(&spec, &kernel, &plan, &lambda, &beta0, &opts)?;
    if !ev.inner.converged {
        return Err(Error::Data("inner solve did not converge".into()));
    }
    let terms = smoothing_terms(&spec, &kernel, &ev.inner, &lambda, Method::Efs)?;
    let mut worst = 0.0f64;
    for u in 0..n_pen.min(3) {
        let h = 1e-4 * lambda[u];
        let mut lp = lambda.clone();
        lp[u] += h;
        let mut lm = lambda.clone();
        lm[u] -= h;
        let vp = evidence_at(&spec, &kernel, &plan, &lp, &ev.inner.beta, &opts)?.value;
        let vm = evidence_at(&spec, &kernel, &plan, &lm, &ev.inner.beta, &opts)?.value;
        let fd = (vp - vm) / (2.0 * h);
        let an = terms[u].gradient();
        worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
    }
    if worst > 1e-3 {
        return Err(Error::Data(format!(
            "evidence gradient off by {worst:e} (relative)"
        )));
    }
    Ok(format!("worst relative error {worst:.1e} over 3 penalties"))
}

fn fit_and_artifact(n: usize) -> Result<String> {
    let sim = sim::smooth_trivariate(2, n, 6, "mcd", 42)?;
    let spec = ModelSpec::<f64>::assemble(&sim.config, &sim.data)?;
    let kernel = McdKernel::new(2)?;
    let plan = Plan::single(&spec, &kernel)?;
    let state = fit(&spec, &kernel, &plan, &FitOptions::default())?;
    if !state.report.converged {
        return Err(Error::Data(format!(
            "fit did not converge: {}",
            state.report.termination
        )));
    }
    let artifact = ModelArtifact::from_fit(
        &spec,
        "mcd",
        &sim.config.response,
        state.beta.as_slice(),
        &state.lambda,
    );
    let pred = artifact.predict(&sim.data)?;
    let round = ModelArtifact::from_json(&artifact.to_json()?)?;
    let pred2 = round.predict(&sim.data)?;
    if pred.mu != pred2.mu || pred.sigma_rvech != pred2.sigma_rvech {
        return Err(Error::Data(
            "reloaded model file does not reproduce predictions bit-for-bit".into(),
        ));
    }
    let rmse = (&pred.sigma_rvech - &sim.truth.sigma_rvech).norm()
        / ((pred.sigma_rvech.nrows() * pred.sigma_rvech.ncols()) as f64).sqrt();
    Ok(format!(
        "converged after {} smoothing updates, covariance RMSE {rmse:.3}",
        state.report.outer_iterations
    ))
}
