//! Model configuration, design assembly, and the fitted-model artifact.
//!
//! A model has `q = d + d(d+1)/2` linear predictors (see
//! [`crate::layout::ThetaLayout`]). Each predictor is built from an implicit
//! intercept plus zero or more terms: penalized cubic B-spline smooths
//! ([`crate::basis`]) or plain linear columns. The same term lists apply to
//! all mean predictors and all covariance predictors respectively, with
//! optional per-predictor overrides, and predictors can be forced to
//! intercept-only.
//!
//! [`ModelSpec`] is the assembled training-time object: design blocks,
//! penalties, response matrix. [`ModelArtifact`] is the serializable fitted
//! model: it stores each smooth's knot range and centering vector so that
//! prediction rebuilds bit-identical design rows, and both the training
//! fitted-values path and the prediction path route through
//! [`ModelArtifact::predict`].

use crate::basis;
use crate::kernel::{Kernel, LogmKernel, McdKernel};
use crate::layout::ThetaLayout;
use crate::{Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;

/// Kind of a model term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TermKind {
    /// Penalized cubic B-spline smooth with `k` basis functions (one column
    /// is absorbed by centering, so it contributes `k - 1` coefficients).
    Spline { k: usize },
    /// Single unpenalized linear column.
    Linear,
}

/// One term in a configuration: a covariate name plus the term kind.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct TermConfig {
    pub covariate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl TermConfig {
    fn resolve(&self) -> Result<TermKind> {
        match self.kind.as_deref() {
            None | Some("spline") => {
                let k = self.k.ok_or_else(|| {
                    Error::Config(format!(
                        "spline term on '{}' needs a basis dimension k",
                        self.covariate
                    ))
                })?;
                Ok(TermKind::Spline { k })
            }
            Some("linear") => {
                if self.k.is_some() {
                    return Err(Error::Config(format!(
                        "linear term on '{}' must not set k",
                        self.covariate
                    )));
                }
                Ok(TermKind::Linear)
            }
            Some(other) => Err(Error::Config(format!(
                "unknown term kind '{other}' on '{}'",
                self.covariate
            ))),
        }
    }
}

/// Top-level model configuration, deserialized from JSON.
///
/// `mean_terms` apply to every mean predictor, `covariance_terms` to every
/// covariance predictor. `overrides` maps 1-based predictor indices (as
/// strings, JSON object keys) to replacement term lists, and `fixed` lists
/// 1-based predictor indices forced to intercept-only.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ModelConfig {
    pub response: Vec<String>,
    #[serde(default)]
    pub mean_terms: Vec<TermConfig>,
    #[serde(default)]
    pub covariance_terms: Vec<TermConfig>,
    #[serde(default)]
    pub overrides: BTreeMap<String, Vec<TermConfig>>,
    #[serde(default)]
    pub fixed: Vec<usize>,
}

impl ModelConfig {
    /// Parse from a JSON string.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid model config: {e}")))
    }

    /// Term list for 0-based predictor `j`, after overrides and fixing.
    fn terms_for(&self, j: usize, d: usize) -> Result<Vec<TermConfig>> {
        if self.fixed.contains(&(j + 1)) {
            return Ok(Vec::new());
        }
        if let Some(list) = self.overrides.get(&(j + 1).to_string()) {
            return Ok(list.clone());
        }
        Ok(if j < d {
            self.mean_terms.clone()
        } else {
            self.covariance_terms.clone()
        })
    }

    fn validate(&self, q: usize) -> Result<()> {
        for key in self.overrides.keys() {
            let idx: usize = key
                .parse()
                .map_err(|_| Error::Config(format!("override key '{key}' is not an integer")))?;
            if idx == 0 || idx > q {
                return Err(Error::Config(format!(
                    "override key {idx} out of range 1..={q}"
                )));
            }
        }
        for &idx in &self.fixed {
            if idx == 0 || idx > q {
                return Err(Error::Config(format!(
                    "fixed index {idx} out of range 1..={q}"
                )));
            }
        }
        Ok(())
    }
}

/// Column-major data table with named columns.
#[derive(Debug, Clone)]
pub struct DataSet<T> {
    names: Vec<String>,
    columns: Vec<Vec<T>>,
    n: usize,
}

impl<T: Scalar> DataSet<T> {
    /// Build from parallel name/column lists; all columns must share a length.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<T>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::ShapeMismatch {
                what: "data column count",
                got: columns.len(),
                expected: names.len(),
            });
        }
        let n = columns.first().map_or(0, Vec::len);
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n {
                return Err(Error::Data(format!(
                    "column '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        Ok(DataSet { names, columns, n })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Column names in order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Look up a column by name.
    pub fn column(&self, name: &str) -> Option<&[T]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    fn required_column(&self, name: &str) -> Result<&[T]> {
        self.column(name)
            .ok_or_else(|| Error::Data(format!("required column '{name}' not found in data")))
    }
}

/// One assembled term inside a predictor block.
#[derive(Debug, Clone)]
pub struct AssembledTerm<T> {
    pub covariate: String,
    pub kind: TermKind,
    /// Column range inside the predictor's design block (column 0 is the
    /// intercept, so term ranges start at 1).
    pub cols: Range<usize>,
    /// Training range of the covariate (splines only).
    pub xmin: T,
    pub xmax: T,
    /// Householder centering vector (splines only).
    pub center_v: Vec<T>,
}

/// Design block of one linear predictor.
#[derive(Debug, Clone)]
pub struct PredictorBlock<T: Scalar> {
    /// `n x p_j` design: leading column of ones, then term columns.
    pub columns: DMatrix<T>,
    pub terms: Vec<AssembledTerm<T>>,
}

impl<T: Scalar> PredictorBlock<T> {
    /// Number of coefficients for this predictor.
    pub fn width(&self) -> usize {
        self.columns.ncols()
    }

    /// True when the predictor carries only its intercept, i.e. its value is
    /// constant across observations. The parsimonious accumulation path keys
    /// off this.
    pub fn intercept_only(&self) -> bool {
        self.terms.is_empty()
    }
}

/// One quadratic penalty attached to a spline term.
#[derive(Debug, Clone)]
pub struct Penalty<T: Scalar> {
    /// 0-based predictor index the penalized coefficients belong to.
    pub predictor: usize,
    /// Offset of the first penalized coefficient inside that predictor.
    pub offset: usize,
    /// Number of penalized coefficients (`k - 1`).
    pub dim: usize,
    /// Centered penalty matrix, `dim x dim`, positive semi-definite.
    pub matrix: DMatrix<T>,
    /// Rank of `matrix`.
    pub rank: usize,
    /// Log pseudo-determinant of `matrix`.
    pub logpdet: T,
}

/// Assembled training-time model: designs, penalties, response.
#[derive(Debug, Clone)]
pub struct ModelSpec<T: Scalar> {
    pub layout: ThetaLayout,
    /// One design block per linear predictor, `layout.q` in total.
    pub blocks: Vec<PredictorBlock<T>>,
    pub penalties: Vec<Penalty<T>>,
    /// Response matrix, `n x d`.
    pub y: DMatrix<T>,
    /// Global coefficient offsets: predictor `j` owns
    /// `p_offsets[j]..p_offsets[j+1]`.
    pub p_offsets: Vec<usize>,
}

/// Build the design columns of one term. Training derives `(xmin, xmax,
/// center_v)` from the data; prediction passes the stored values. Both routes
/// call this function, so equal inputs give bit-identical columns.
fn term_columns<T: Scalar>(
    x: &[T],
    kind: &TermKind,
    xmin: T,
    xmax: T,
    center_v: &[T],
) -> Result<DMatrix<T>> {
    match kind {
        TermKind::Linear => {
            let mut out = DMatrix::zeros(x.len(), 1);
            for (i, &v) in x.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: "covariate value",
                        row: Some(i),
                    });
                }
                out[(i, 0)] = v;
            }
            Ok(out)
        }
        TermKind::Spline { k } => {
            let raw = basis::spline_design_from_range(x, xmin, xmax, *k)?;
            basis::apply_centering(&raw, center_v)
        }
    }
}

impl<T: Scalar> ModelSpec<T> {
    /// Assemble a model from a configuration and a training data set.
    pub fn assemble(config: &ModelConfig, data: &DataSet<T>) -> Result<Self> {
        let d = config.response.len();
        let layout = ThetaLayout::new(d)?;
        let q = layout.q;
        config.validate(q)?;
        let n = data.n();
        if n < 2 {
            return Err(Error::Data(format!(
                "need at least 2 observations, got {n}"
            )));
        }

        // Response matrix.
        let mut y = DMatrix::zeros(n, d);
        for (j, name) in config.response.iter().enumerate() {
            let col = data.required_column(name)?;
            for i in 0..n {
                if !col[i].is_finite() {
                    return Err(Error::NonFinite {
                        what: "response value",
                        row: Some(i),
                    });
                }
                y[(i, j)] = col[i];
            }
        }

        // Cache spline scaffolding per (covariate, k): range, centering
        // vector, centered design, centered penalty with rank and logpdet.
        type SplineEntry<T> = (T, T, Vec<T>, DMatrix<T>, DMatrix<T>, usize, T);
        let mut spline_cache: BTreeMap<(String, usize), SplineEntry<T>> = BTreeMap::new();

        let mut blocks = Vec::with_capacity(q);
        let mut penalties = Vec::new();
        let mut p_offsets = vec![0usize];

        for j in 0..q {
            let term_configs = config.terms_for(j, d)?;
            let mut width = 1usize;
            let mut resolved = Vec::new();
            for tc in &term_configs {
                let kind = tc.resolve()?;
                width += match kind {
                    TermKind::Spline { k } => k - 1,
                    TermKind::Linear => 1,
                };
                resolved.push((tc.covariate.clone(), kind));
            }

            let mut columns = DMatrix::zeros(n, width);
            for i in 0..n {
                columns[(i, 0)] = T::one();
            }
            let mut terms = Vec::new();
            let mut at = 1usize;
            for (covariate, kind) in resolved {
                let x = data.required_column(&covariate)?;
                let (cols, xmin, xmax, center_v) = match kind {
                    TermKind::Linear => {
                        let cols = term_columns(x, &kind, T::zero(), T::zero(), &[])?;
                        (cols, T::zero(), T::zero(), Vec::new())
                    }
                    TermKind::Spline { k } => {
                        let key = (covariate.clone(), k);
                        if !spline_cache.contains_key(&key) {
                            if n < k {
                                return Err(Error::InsufficientData {
                                    covariate: covariate.clone(),
                                    k,
                                    n,
                                });
                            }
                            let mut xmin = x[0];
                            let mut xmax = x[0];
                            for (i, &v) in x.iter().enumerate() {
                                if !v.is_finite() {
                                    return Err(Error::NonFinite {
                                        what: "covariate value",
                                        row: Some(i),
                                    });
                                }
                                xmin = xmin.min(v);
                                xmax = xmax.max(v);
                            }
                            if !(xmax > xmin) {
                                return Err(Error::ConstantCovariate(covariate.clone()));
                            }
                            let raw = basis::spline_design_from_range(x, xmin, xmax, k)?;
                            let v = basis::centering_vector(&raw);
                            let centered = basis::apply_centering(&raw, &v)?;
                            let s_raw = basis::second_difference_penalty::<T>(k)?;
                            let s_centered = basis::center_penalty(&s_raw, &v)?;
                            let (rank, logpdet) = basis::penalty_rank_logpdet(&s_centered)?;
                            spline_cache
                                .insert(key.clone(), (xmin, xmax, v, centered, s_centered, rank, logpdet));
                        }
                        let (xmin, xmax, v, centered, s_centered, rank, logpdet) =
                            spline_cache.get(&key).expect("just inserted");
                        penalties.push(Penalty {
                            predictor: j,
                            offset: at,
                            dim: centered.ncols(),
                            matrix: s_centered.clone(),
                            rank: *rank,
                            logpdet: *logpdet,
                        });
                        (centered.clone(), *xmin, *xmax, v.clone())
                    }
                };
                let span = at..at + cols.ncols();
                for (c, col_idx) in span.clone().enumerate() {
                    for i in 0..n {
                        columns[(i, col_idx)] = cols[(i, c)];
                    }
                }
                terms.push(AssembledTerm {
                    covariate,
                    kind,
                    cols: span.clone(),
                    xmin,
                    xmax,
                    center_v,
                });
                at = span.end;
            }
            debug_assert_eq!(at, width);
            p_offsets.push(p_offsets[j] + width);
            blocks.push(PredictorBlock { columns, terms });
        }

        Ok(ModelSpec {
            layout,
            blocks,
            penalties,
            y,
            p_offsets,
        })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    /// Total number of coefficients.
    pub fn p_total(&self) -> usize {
        *self.p_offsets.last().expect("offsets nonempty")
    }

    /// Global coefficient range of predictor `j`.
    pub fn coef_range(&self, j: usize) -> Range<usize> {
        self.p_offsets[j]..self.p_offsets[j + 1]
    }

    /// Global coefficient range of penalty `u`.
    pub fn penalty_range(&self, u: usize) -> Range<usize> {
        let pen = &self.penalties[u];
        let base = self.p_offsets[pen.predictor] + pen.offset;
        base..base + pen.dim
    }

    /// Evaluate all linear predictors at `beta`, writing row-major `n x q`
    /// output (row `i` holds the `q` predictor values of observation `i`).
    pub fn eta_into(&self, beta: &[T], out: &mut [T]) -> Result<()> {
        let n = self.n();
        let q = self.layout.q;
        if beta.len() != self.p_total() {
            return Err(Error::ShapeMismatch {
                what: "coefficient vector length",
                got: beta.len(),
                expected: self.p_total(),
            });
        }
        if out.len() != n * q {
            return Err(Error::ShapeMismatch {
                what: "eta buffer length",
                got: out.len(),
                expected: n * q,
            });
        }
        let mut col = DVector::<T>::zeros(n);
        for j in 0..q {
            let block = &self.blocks[j];
            let bj = DVector::from_column_slice(&beta[self.coef_range(j)]);
            col.gemv(T::one(), &block.columns, &bj, T::zero());
            for i in 0..n {
                out[i * q + j] = col[i];
            }
        }
        Ok(())
    }

    /// Starting coefficients: the intercept of each log-variance predictor is
    /// initialized at the log marginal variance of the matching response
    /// column; every other coefficient starts at zero. Both parametrisations
    /// place log-variances on the diagonal slots when all other slots are
    /// zero, so the same start serves both.
    pub fn beta_init(&self) -> Result<Vec<T>> {
        let n = self.n();
        let d = self.layout.d;
        let mut beta = vec![T::zero(); self.p_total()];
        let denom = T::of((n - 1) as f64);
        for j in 0..d {
            let mut mean = T::zero();
            for i in 0..n {
                mean += self.y[(i, j)];
            }
            mean /= T::of(n as f64);
            let mut var = T::zero();
            for i in 0..n {
                let c = self.y[(i, j)] - mean;
                var += c * c;
            }
            var /= denom;
            if !(var > T::zero()) {
                return Err(Error::Data(format!(
                    "response column {j} has zero variance"
                )));
            }
            beta[self.p_offsets[d + j]] = var.ln();
        }
        Ok(beta)
    }
}

/// Serialized description of one fitted term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermArtifact {
    pub covariate: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xmin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xmax: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub center_v: Vec<f64>,
}

/// Serialized description of one predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorArtifact {
    pub terms: Vec<TermArtifact>,
}

/// The complete fitted model, as written to and read from `model.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    /// `"mcd"` or `"logm"`.
    pub parametrisation: String,
    pub d: usize,
    pub response: Vec<String>,
    pub predictors: Vec<PredictorArtifact>,
    /// Concatenated coefficients in predictor order.
    pub beta: Vec<f64>,
    /// Smoothing parameters in penalty order.
    pub lambda: Vec<f64>,
}

/// Prediction output: means, covariance rows, and how many covariate values
/// had to be clamped to their training range.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `n x d` matrix of means.
    pub mu: DMatrix<f64>,
    /// `n x d(d+1)/2` matrix: each row is the covariance matrix's lower
    /// triangle (diagonal included) in row-wise order.
    pub sigma_rvech: DMatrix<f64>,
    /// Count of covariate values outside the stored training range.
    pub clamped: usize,
}

impl ModelArtifact {
    /// Capture a fitted model.
    pub fn from_fit(
        spec: &ModelSpec<f64>,
        parametrisation: &str,
        response: &[String],
        beta: &[f64],
        lambda: &[f64],
    ) -> Self {
        let predictors = spec
            .blocks
            .iter()
            .map(|b| PredictorArtifact {
                terms: b
                    .terms
                    .iter()
                    .map(|t| match &t.kind {
                        TermKind::Spline { k } => TermArtifact {
                            covariate: t.covariate.clone(),
                            kind: "spline".into(),
                            k: Some(*k),
                            xmin: Some(t.xmin),
                            xmax: Some(t.xmax),
                            center_v: t.center_v.clone(),
                        },
                        TermKind::Linear => TermArtifact {
                            covariate: t.covariate.clone(),
                            kind: "linear".into(),
                            k: None,
                            xmin: None,
                            xmax: None,
                            center_v: Vec::new(),
                        },
                    })
                    .collect(),
            })
            .collect();
        ModelArtifact {
            parametrisation: parametrisation.to_string(),
            d: spec.layout.d,
            response: response.to_vec(),
            predictors,
            beta: beta.to_vec(),
            lambda: lambda.to_vec(),
        }
    }

    /// Parse from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid model file: {e}")))
    }

    /// Serialize to pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize model: {e}")))
    }

    /// Evaluate the fitted model on a data set: linear predictors from the
    /// stored term descriptions, then means and covariance matrices through
    /// the stored parametrisation. The training fitted-values output and the
    /// prediction command both call this, so the two agree bit-for-bit on
    /// identical inputs.
    pub fn predict(&self, data: &DataSet<f64>) -> Result<Prediction> {
        let layout = ThetaLayout::new(self.d)?;
        let q = layout.q;
        if self.predictors.len() != q {
            return Err(Error::ShapeMismatch {
                what: "predictor count in model file",
                got: self.predictors.len(),
                expected: q,
            });
        }
        let n = data.n();
        let mut clamped = 0usize;
        let mut eta = vec![0.0f64; n * q];
        let mut at = 0usize;
        for (j, pred) in self.predictors.iter().enumerate() {
            // Intercept.
            let b0 = *self.beta.get(at).ok_or_else(|| {
                Error::Config("model file beta vector is too short".to_string())
            })?;
            at += 1;
            for i in 0..n {
                eta[i * q + j] += b0;
            }
            for term in &pred.terms {
                let x = data.required_column(&term.covariate)?;
                let (kind, xmin, xmax) = match term.kind.as_str() {
                    "linear" => (TermKind::Linear, 0.0, 0.0),
                    "spline" => {
                        let k = term.k.ok_or_else(|| {
                            Error::Config("spline term in model file lacks k".into())
                        })?;
                        let xmin = term.xmin.ok_or_else(|| {
                            Error::Config("spline term in model file lacks xmin".into())
                        })?;
                        let xmax = term.xmax.ok_or_else(|| {
                            Error::Config("spline term in model file lacks xmax".into())
                        })?;
                        for &v in x {
                            if v < xmin || v > xmax {
                                clamped += 1;
                            }
                        }
                        (TermKind::Spline { k }, xmin, xmax)
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "unknown term kind '{other}' in model file"
                        )))
                    }
                };
                let cols = term_columns(x, &kind, xmin, xmax, &term.center_v)?;
                let w = cols.ncols();
                if at + w > self.beta.len() {
                    return Err(Error::Config(
                        "model file beta vector is too short".to_string(),
                    ));
                }
                for c in 0..w {
                    let b = self.beta[at + c];
                    for i in 0..n {
                        eta[i * q + j] += cols[(i, c)] * b;
                    }
                }
                at += w;
            }
        }
        if at != self.beta.len() {
            return Err(Error::Config(format!(
                "model file beta vector has {} entries, design uses {at}",
                self.beta.len()
            )));
        }

        let d = self.d;
        let mut mu = DMatrix::zeros(n, d);
        let mut sigma_rvech = DMatrix::zeros(n, d * (d + 1) / 2);
        let mcd;
        let logm;
        let sigma_of: &dyn Fn(&[f64]) -> Result<DMatrix<f64>> = match self.parametrisation.as_str()
        {
            "mcd" => {
                mcd = McdKernel::new(d)?;
                &move |row: &[f64]| <McdKernel as Kernel<f64>>::sigma(&mcd, row)
            }
            "logm" => {
                logm = LogmKernel::new(d)?;
                &move |row: &[f64]| <LogmKernel as Kernel<f64>>::sigma(&logm, row)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown parametrisation '{other}' in model file"
                )))
            }
        };
        for i in 0..n {
            let row = &eta[i * q..(i + 1) * q];
            for j in 0..d {
                mu[(i, j)] = row[j];
            }
            let sigma = sigma_of(row).map_err(|e| e.with_row(i))?;
            let mut c = 0usize;
            for r in 0..d {
                for s in 0..=r {
                    sigma_rvech[(i, c)] = sigma[(r, s)];
                    c += 1;
                }
            }
        }
        Ok(Prediction {
            mu,
            sigma_rvech,
            clamped,
        })
    }
}
