//! Command-line tool for fitting multivariate Gaussian additive models in
//! which both the mean vector and the covariance matrix depend on
//! covariates.
//!
//! Subcommands: `fit`, `predict`, `simulate`, `verify`, `bench`. Exit codes:
//! 0 success, 1 usage/configuration problems, 2 non-convergence (partial
//! outputs are still written), 3 numeric failures.

mod commands;
mod io;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gacm::accum::Path as AccumPath;
use gacm::fit::Method;
use gacm::sim::SparsityRule;

#[derive(Parser)]
#[command(
    name = "gacm",
    version,
    about = "Fit multivariate Gaussian additive models whose means and covariance matrices \
             both depend on covariates"
)]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model to CSV data and write the fitted artifacts.
    Fit(FitArgs),
    /// Evaluate a fitted model on new data.
    Predict(PredictArgs),
    /// Generate synthetic data with known ground truth.
    Simulate(SimulateArgs),
    /// Run fast self-checks and print one TAP line per check.
    Verify(VerifyArgs),
    /// Time derivative accumulation over a grid and write a TSV table.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum MethodArg {
    /// Fellner-Schall smoothing updates (works with every parametrisation).
    Fs,
    /// Exact-gradient updates (needs third derivatives; MCD only).
    Efs,
}

impl MethodArg {
    pub(crate) fn name(self) -> &'static str {
        match self {
            MethodArg::Fs => "fs",
            MethodArg::Efs => "efs",
        }
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Fs => Method::Fs,
            MethodArg::Efs => Method::Efs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum ParamArg {
    /// Modified-Cholesky parametrisation of the covariance matrix.
    Mcd,
    /// Matrix-logarithm parametrisation.
    Logm,
}

impl ParamArg {
    pub(crate) fn name(self) -> &'static str {
        match self {
            ParamArg::Mcd => "mcd",
            ParamArg::Logm => "logm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum PathArg {
    /// Pick the path with the smaller estimated memory footprint.
    Auto,
    /// Store per-row derivative weights for every Hessian slot.
    Standard,
    /// Fold constant predictors on the fly; stores less for sparse models.
    Parsimonious,
}

impl PathArg {
    pub(crate) fn name(self) -> &'static str {
        match self {
            PathArg::Auto => "auto",
            PathArg::Standard => "standard",
            PathArg::Parsimonious => "parsimonious",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum BenchPathArg {
    Standard,
    Parsimonious,
}

impl BenchPathArg {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BenchPathArg::Standard => "standard",
            BenchPathArg::Parsimonious => "parsimonious",
        }
    }
}

impl From<BenchPathArg> for AccumPath {
    fn from(p: BenchPathArg) -> AccumPath {
        match p {
            BenchPathArg::Standard => AccumPath::Standard,
            BenchPathArg::Parsimonious => AccumPath::Parsimonious,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum ScenarioArg {
    /// Three covariates with nonlinear mean and covariance effects.
    Smooth,
    /// Ten covariates with linear effects and random covariance sparsity.
    Sparse,
}

impl ScenarioArg {
    pub(crate) fn name(self) -> &'static str {
        match self {
            ScenarioArg::Smooth => "smooth",
            ScenarioArg::Sparse => "sparse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum RuleArg {
    /// Constancy probability 1 - d^(-1/2).
    InverseSqrt,
    /// Constancy probability 1 - 2/d (needs d >= 4).
    TwoOverD,
}

impl RuleArg {
    pub(crate) fn name(self) -> &'static str {
        match self {
            RuleArg::InverseSqrt => "inverse-sqrt",
            RuleArg::TwoOverD => "two-over-d",
        }
    }
}

impl From<RuleArg> for SparsityRule {
    fn from(r: RuleArg) -> SparsityRule {
        match r {
            RuleArg::InverseSqrt => SparsityRule::InverseSqrt,
            RuleArg::TwoOverD => SparsityRule::TwoOverD,
        }
    }
}

/// Block-count request: `auto` or an explicit positive count.
#[derive(Clone, Debug)]
pub(crate) struct BlocksArg(pub(crate) Option<usize>);

impl BlocksArg {
    pub(crate) fn label(&self) -> String {
        match self.0 {
            Some(b) => b.to_string(),
            None => "auto".into(),
        }
    }
}

fn parse_blocks(s: &str) -> Result<BlocksArg, String> {
    if s == "auto" {
        return Ok(BlocksArg(None));
    }
    s.parse::<usize>().map(|b| BlocksArg(Some(b))).map_err(|_| {
        format!("'{s}' is not a block count (use 'auto' or a positive integer)")
    })
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let (digits, multiplier) = if let Some(x) = t.strip_suffix("GiB") {
        (x, 1u64 << 30)
    } else if let Some(x) = t.strip_suffix("MiB") {
        (x, 1u64 << 20)
    } else if let Some(x) = t.strip_suffix("KiB") {
        (x, 1u64 << 10)
    } else {
        (t, 1u64)
    };
    let value: u64 = digits.trim().parse().map_err(|_| {
        format!("'{s}' is not a byte count (use an integer, optionally with KiB/MiB/GiB)")
    })?;
    value
        .checked_mul(multiplier)
        .ok_or_else(|| format!("'{s}' overflows the byte counter"))
}

#[derive(Args)]
pub(crate) struct FitArgs {
    /// Model configuration JSON.
    #[arg(long)]
    pub(crate) config: PathBuf,
    /// Data CSV with one named column per covariate and response.
    #[arg(long)]
    pub(crate) data: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub(crate) out: PathBuf,
    /// Smoothing-parameter update rule.
    #[arg(long, value_enum, default_value_t = MethodArg::Fs)]
    pub(crate) method: MethodArg,
    /// Covariance parametrisation.
    #[arg(long, value_enum, default_value_t = ParamArg::Mcd)]
    pub(crate) param: ParamArg,
    /// Memory budget for curvature accumulation (KiB/MiB/GiB suffixes allowed).
    #[arg(long, value_parser = parse_bytes, default_value = "1GiB", value_name = "BYTES")]
    pub(crate) memory_budget: u64,
    /// Row blocks for accumulation: 'auto' picks the fewest that fit the budget.
    #[arg(long, value_parser = parse_blocks, default_value = "auto", value_name = "auto|K")]
    pub(crate) blocks: BlocksArg,
    /// Accumulation path.
    #[arg(long, value_enum, default_value_t = PathArg::Auto)]
    pub(crate) path: PathArg,
}

#[derive(Args)]
pub(crate) struct PredictArgs {
    /// Fitted model JSON written by `fit`.
    #[arg(long)]
    pub(crate) model: PathBuf,
    /// Data CSV holding the covariates named in the model.
    #[arg(long)]
    pub(crate) data: PathBuf,
    /// Output CSV of means and half-vectorized covariances.
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(Args)]
pub(crate) struct SimulateArgs {
    /// Generating process family.
    #[arg(long, value_enum)]
    pub(crate) scenario: ScenarioArg,
    /// Response dimension.
    #[arg(long)]
    pub(crate) d: usize,
    /// Number of observations.
    #[arg(long)]
    pub(crate) n: usize,
    /// Spline basis dimension of the suggested configuration (smooth scenario).
    #[arg(long, default_value_t = 10)]
    pub(crate) k: usize,
    /// Covariance parametrisation used to sample responses.
    #[arg(long, value_enum, default_value_t = ParamArg::Mcd)]
    pub(crate) param: ParamArg,
    #[arg(long, default_value_t = 1)]
    pub(crate) seed: u64,
    /// Constancy rule of the sparse scenario.
    #[arg(long, value_enum, default_value_t = RuleArg::InverseSqrt)]
    pub(crate) sparsity: RuleArg,
    /// Sparse-scenario variant with intercept-only means.
    #[arg(long)]
    pub(crate) means_fixed: bool,
    /// Output directory (created if missing).
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(Args)]
pub(crate) struct VerifyArgs {
    /// Which checks to run: derivs, sparsity, blocks, laml, or all.
    #[arg(default_value = "all")]
    pub(crate) suite: String,
    /// Response dimension of the derivative checks.
    #[arg(long, default_value_t = 3)]
    pub(crate) d: usize,
    /// Multiplier on the row counts of the data-driven checks.
    #[arg(long, default_value_t = 1.0)]
    pub(crate) scale: f64,
    /// Directory for the run manifest (omitted when not given).
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct BenchArgs {
    /// Response dimensions to time.
    #[arg(long, value_delimiter = ',', default_values = ["5", "10", "20"])]
    pub(crate) d: Vec<usize>,
    /// Parametrisations to time.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["mcd", "logm"])]
    pub(crate) kernel: Vec<ParamArg>,
    /// Accumulation paths to time.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["standard", "parsimonious"])]
    pub(crate) path: Vec<BenchPathArg>,
    /// Rows in the timing dataset.
    #[arg(long, default_value_t = 200)]
    pub(crate) n: usize,
    /// Timed repetitions per cell (after one warm-up run).
    #[arg(long, default_value_t = 5)]
    pub(crate) reps: usize,
    #[arg(long, default_value_t = 1)]
    pub(crate) seed: u64,
    /// Memory budget for the planned accumulation.
    #[arg(long, value_parser = parse_bytes, default_value = "1GiB", value_name = "BYTES")]
    pub(crate) memory_budget: u64,
    /// Output TSV path.
    #[arg(long)]
    pub(crate) out: PathBuf,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} worker thread(s): {e}");
            return 1;
        }
    }
    let outcome = match &cli.cmd {
        Cmd::Fit(a) => commands::cmd_fit(a),
        Cmd::Predict(a) => commands::cmd_predict(a),
        Cmd::Simulate(a) => commands::cmd_simulate(a),
        Cmd::Verify(a) => commands::cmd_verify(a),
        Cmd::Bench(a) => commands::cmd_bench(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
