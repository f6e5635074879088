//! Implementations of the subcommands. Each returns the process exit code
//! on success; errors bubble up and are mapped to exit codes in `main`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gacm::accum::{accumulate, plan_blocks, Path as AccumPath, Plan};
use gacm::fit::{fit, FitOptions};
use gacm::kernel::{Kernel, LogmKernel, McdKernel};
use gacm::model::{DataSet, ModelArtifact, ModelConfig, ModelSpec};
use gacm::sim::{smooth_trivariate, sparse_linear, SparsityRule};
use gacm::{Error, Result};

use crate::io::{
    file_digest, io_err, json_digest, read_dataset, write_dataset, write_indexed, write_moments,
    Manifest,
};
use crate::{
    BenchArgs, FitArgs, MethodArg, ParamArg, PathArg, PredictArgs, ScenarioArg, SimulateArgs,
    VerifyArgs,
};

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub(crate) fn cmd_fit(a: &FitArgs) -> Result<i32> {
    if a.method == MethodArg::Efs && a.param == ParamArg::Logm {
        return Err(Error::Unsupported(
            "EFS unsupported for logM: the exact-gradient update needs third derivatives, \
             which this parametrisation does not provide; use --method fs"
                .into(),
        ));
    }
    let t_read = Instant::now();
    let config_text = fs::read_to_string(&a.config).map_err(|e| io_err(&a.config, e))?;
    let config = ModelConfig::from_json(&config_text)?;
    let data = read_dataset(&a.data)?;
    let read_s = t_read.elapsed().as_secs_f64();

    let t_assemble = Instant::now();
    let spec = ModelSpec::<f64>::assemble(&config, &data)?;
    let assemble_s = t_assemble.elapsed().as_secs_f64();

    let d = spec.layout.d;
    match a.param {
        ParamArg::Mcd => fit_with(
            &McdKernel::new(d)?,
            a,
            &config,
            &config_text,
            &data,
            &spec,
            read_s,
            assemble_s,
        ),
        ParamArg::Logm => fit_with(
            &LogmKernel::new(d)?,
            a,
            &config,
            &config_text,
            &data,
            &spec,
            read_s,
            assemble_s,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_with<K: Kernel<f64>>(
    kernel: &K,
    a: &FitArgs,
    config: &ModelConfig,
    config_text: &str,
    data: &DataSet<f64>,
    spec: &ModelSpec<f64>,
    read_s: f64,
    assemble_s: f64,
) -> Result<i32> {
    let plan = choose_plan(spec, kernel, a.path, a.memory_budget as usize, a.blocks.0)?;
    let opts = FitOptions {
        method: a.method.into(),
        ..FitOptions::default()
    };
    let t_fit = Instant::now();
    let state = fit(spec, kernel, &plan, &opts)?;
    let fit_s = t_fit.elapsed().as_secs_f64();

    let t_write = Instant::now();
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let artifact = ModelArtifact::from_fit(
        spec,
        kernel.name(),
        &config.response,
        state.beta.as_slice(),
        &state.lambda,
    );
    let model_path = a.out.join("model.json");
    let model_text = artifact.to_json()?;
    fs::write(&model_path, model_text + "\n").map_err(|e| io_err(&model_path, e))?;

    let report_path = a.out.join("report.json");
    let report_text = serde_json::to_string_pretty(&state.report)
        .map_err(|e| Error::Config(format!("cannot serialize fit report: {e}")))?;
    fs::write(&report_path, report_text + "\n").map_err(|e| io_err(&report_path, e))?;

    write_indexed(&a.out.join("beta.csv"), "beta", state.beta.as_slice())?;
    write_indexed(&a.out.join("lambda.csv"), "lambda", &state.lambda)?;

    // Per-observation fitted moments go through the same code path as the
    // predict command, so predicting on the training data reproduces this
    // file byte for byte.
    let fitted = artifact.predict(data)?;
    write_moments(&a.out.join("fitted.csv"), &fitted.mu, &fitted.sigma_rvech)?;
    let write_s = t_write.elapsed().as_secs_f64();

    let command = format!(
        "fit --method {} --param {} --path {} --blocks {} --memory-budget {}",
        a.method.name(),
        a.param.name(),
        a.path.name(),
        a.blocks.label(),
        a.memory_budget
    );
    let mut inputs = BTreeMap::new();
    inputs.insert("config".into(), json_digest(config_text)?);
    inputs.insert("data".into(), file_digest(&a.data)?);
    let outputs = vec![
        "model.json".into(),
        "report.json".into(),
        "beta.csv".into(),
        "lambda.csv".into(),
        "fitted.csv".into(),
    ];
    let mut manifest = Manifest::new(&command, inputs, None, outputs);
    manifest.timing("read", read_s);
    manifest.timing("assemble", assemble_s);
    manifest.timing("fit", fit_s);
    manifest.timing("fit.accumulate", state.phase_s.accumulate);
    manifest.timing("fit.factor_solve", state.phase_s.factor_solve);
    manifest.timing("fit.smoothing", state.phase_s.smoothing);
    manifest.timing("write", write_s);
    manifest.write(&a.out.join("manifest.json"))?;

    // Human summary on the diagnostics stream; stdout stays silent so fit
    // output is consumed from the files only.
    let r = &state.report;
    eprintln!(
        "{}: n={} d={} coefficients={} penalties={} | {} path, {} block(s) | \
         log-likelihood {:.6}, criterion {:.6} | {} outer / {} inner iterations",
        if r.converged {
            "converged"
        } else {
            "did not converge"
        },
        r.n,
        r.d,
        r.p,
        r.penalties,
        r.path,
        r.blocks,
        r.loglik,
        r.laml,
        r.outer_iterations,
        r.inner_iterations,
    );
    if r.converged {
        Ok(0)
    } else {
        eprintln!(
            "warning: stopping rule not met ({}); outputs reflect the last state reached",
            r.termination
        );
        Ok(2)
    }
}

/// Resolve the accumulation path. `Auto` plans both paths and keeps the one
/// with the smaller estimated footprint, falling back to whichever fits the
/// budget at all.
fn choose_plan<K: Kernel<f64>>(
    spec: &ModelSpec<f64>,
    kernel: &K,
    path: PathArg,
    budget: usize,
    blocks: Option<usize>,
) -> Result<Plan> {
    let pattern = kernel.pattern();
    match path {
        PathArg::Standard => plan_blocks(spec, pattern, budget, AccumPath::Standard, blocks),
        PathArg::Parsimonious => {
            plan_blocks(spec, pattern, budget, AccumPath::Parsimonious, blocks)
        }
        PathArg::Auto => {
            let standard = plan_blocks(spec, pattern, budget, AccumPath::Standard, blocks);
            let parsim = plan_blocks(spec, pattern, budget, AccumPath::Parsimonious, blocks);
            match (standard, parsim) {
                (Ok(s), Ok(p)) => Ok(if p.bytes_estimate < s.bytes_estimate { p } else { s }),
                (Ok(s), Err(_)) => Ok(s),
                (Err(_), Ok(p)) => Ok(p),
                (Err(e), Err(_)) => Err(e),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub(crate) fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let t0 = Instant::now();
    let model_text = fs::read_to_string(&a.model).map_err(|e| io_err(&a.model, e))?;
    let artifact = ModelArtifact::from_json(&model_text)?;
    let data = read_dataset(&a.data)?;
    let pred = artifact.predict(&data)?;
    if pred.clamped > 0 {
        eprintln!(
            "warning: {} covariate value(s) fell outside the training range and were \
             clamped to it",
            pred.clamped
        );
    }
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    write_moments(&a.out, &pred.mu, &pred.sigma_rvech)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("model".into(), json_digest(&model_text)?);
    inputs.insert("data".into(), file_digest(&a.data)?);
    let mut manifest = Manifest::new(
        "predict",
        inputs,
        None,
        vec![a.out.display().to_string()],
    );
    manifest.timing("total", t0.elapsed().as_secs_f64());
    manifest.write(&manifest_path_for(&a.out))?;
    eprintln!("predicted {} row(s)", pred.mu.nrows());
    Ok(0)
}

/// `out.csv` -> `out.manifest.json` next to it.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    name.push_str(".manifest.json");
    out.with_file_name(name)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub(crate) fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let t0 = Instant::now();
    let sim = match a.scenario {
        ScenarioArg::Smooth => smooth_trivariate(a.d, a.n, a.k, a.param.name(), a.seed)?,
        ScenarioArg::Sparse => sparse_linear(
            a.d,
            a.n,
            a.sparsity.into(),
            a.means_fixed,
            a.param.name(),
            a.seed,
        )?,
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_dataset(&a.out.join("data.csv"), &sim.data)?;
    let config_path = a.out.join("config.json");
    let config_text = serde_json::to_string_pretty(&sim.config)
        .map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))?;
    fs::write(&config_path, config_text + "\n").map_err(|e| io_err(&config_path, e))?;
    write_moments(
        &a.out.join("truth.csv"),
        &sim.truth.mu,
        &sim.truth.sigma_rvech,
    )?;

    let command = format!(
        "simulate --scenario {} --d {} --n {} --k {} --param {} --sparsity {} --means-fixed {}",
        a.scenario.name(),
        a.d,
        a.n,
        a.k,
        a.param.name(),
        a.sparsity.name(),
        a.means_fixed
    );
    let outputs = vec!["data.csv".into(), "config.json".into(), "truth.csv".into()];
    let mut manifest = Manifest::new(&command, BTreeMap::new(), Some(a.seed), outputs);
    manifest.timing("total", t0.elapsed().as_secs_f64());

    // Summary statistics of the true linear predictors, one entry per
    // predictor column.
    let eta = &sim.truth.eta;
    let mut mins = Vec::with_capacity(eta.ncols());
    let mut means = Vec::with_capacity(eta.ncols());
    let mut maxs = Vec::with_capacity(eta.ncols());
    for c in 0..eta.ncols() {
        let col = eta.column(c);
        mins.push(col.min());
        means.push(col.mean());
        maxs.push(col.max());
    }
    manifest
        .extra
        .insert("eta_min".into(), serde_json::json!(mins));
    manifest
        .extra
        .insert("eta_mean".into(), serde_json::json!(means));
    manifest
        .extra
        .insert("eta_max".into(), serde_json::json!(maxs));
    manifest.write(&a.out.join("manifest.json"))?;

    eprintln!(
        "wrote {} rows with d={} to {}",
        a.n,
        a.d,
        a.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub(crate) fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let battery = gacm::verify::suite(&a.suite, a.d, a.scale)?;
    let t0 = Instant::now();
    println!("1..{}", battery.len());
    let mut failed = 0usize;
    for (i, check) in battery.iter().enumerate() {
        match (check.run)() {
            Ok(detail) => println!("ok {} - {} # {detail}", i + 1, check.name),
            Err(e) => {
                failed += 1;
                println!("not ok {} - {} # {e}", i + 1, check.name);
            }
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let command = format!("verify {} --d {} --scale {}", a.suite, a.d, a.scale);
        let mut manifest = Manifest::new(&command, BTreeMap::new(), None, Vec::new());
        manifest.timing("total", t0.elapsed().as_secs_f64());
        manifest
            .extra
            .insert("checks".into(), serde_json::json!(battery.len()));
        manifest
            .extra
            .insert("failed".into(), serde_json::json!(failed));
        manifest.write(&dir.join("manifest.json"))?;
    }
    if failed > 0 {
        eprintln!("{failed} of {} check(s) failed", battery.len());
        Ok(3)
    } else {
        Ok(0)
    }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub(crate) fn cmd_bench(a: &BenchArgs) -> Result<i32> {
    if a.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if a.d.is_empty() || a.kernel.is_empty() || a.path.is_empty() {
        return Err(Error::Config(
            "the d, kernel, and path grids must each name at least one value".into(),
        ));
    }
    let t0 = Instant::now();
    let mut lines = vec!["d\tkernel\tpath\tn\treps\tmedian_s\tp10_s\tp90_s".to_string()];
    for &d in &a.d {
        // One dataset per dimension; both kernels and paths time the same
        // linear predictors.
        let sim = sparse_linear(d, a.n, SparsityRule::InverseSqrt, false, "mcd", a.seed)?;
        let spec = ModelSpec::<f64>::assemble(&sim.config, &sim.data)?;
        let beta = spec.beta_init()?;
        let mut eta = vec![0.0; spec.n() * spec.layout.q];
        spec.eta_into(&beta, &mut eta)?;
        for &kernel_arg in &a.kernel {
            let cell = match kernel_arg {
                ParamArg::Mcd => bench_cell(&McdKernel::new(d)?, &spec, &eta, a, d)?,
                ParamArg::Logm => bench_cell(&LogmKernel::new(d)?, &spec, &eta, a, d)?,
            };
            lines.extend(cell);
        }
    }
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(&a.out, lines.join("\n") + "\n").map_err(|e| io_err(&a.out, e))?;

    let command = format!(
        "bench --d {} --kernel {} --path {} --n {} --reps {} --memory-budget {}",
        a.d.iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
        a.kernel
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join(","),
        a.path
            .iter()
            .map(|p| p.name())
            .collect::<Vec<_>>()
            .join(","),
        a.n,
        a.reps,
        a.memory_budget
    );
    let mut manifest = Manifest::new(
        &command,
        BTreeMap::new(),
        Some(a.seed),
        vec![a.out.display().to_string()],
    );
    manifest.timing("total", t0.elapsed().as_secs_f64());
    manifest.write(&manifest_path_for(&a.out))?;
    eprintln!("wrote {} timing row(s) to {}", lines.len() - 1, a.out.display());
    Ok(0)
}

fn bench_cell<K: Kernel<f64>>(
    kernel: &K,
    spec: &ModelSpec<f64>,
    eta: &[f64],
    a: &BenchArgs,
    d: usize,
) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for &path in &a.path {
        let plan = plan_blocks(
            spec,
            kernel.pattern(),
            a.memory_budget as usize,
            path.into(),
            None,
        )?;
        accumulate(spec, kernel, eta, &plan)?; // warm-up
        let mut times = Vec::with_capacity(a.reps);
        for _ in 0..a.reps {
            let t = Instant::now();
            accumulate(spec, kernel, eta, &plan)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let pct = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
        lines.push(format!(
            "{d}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            kernel.name(),
            path.name(),
            spec.n(),
            a.reps,
            pct(0.5),
            pct(0.1),
            pct(0.9)
        ));
    }
    Ok(lines)
}
