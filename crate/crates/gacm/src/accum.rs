//! Block-wise accumulation of the log-likelihood, its gradient, and its
//! Hessian over all observations.
//!
//! The per-observation kernel produces `O(q^2)` Hessian values per row, which
//! cannot all be held in memory at once for large models. Rows are therefore
//! processed in contiguous **blocks** sized to a caller-provided memory
//! budget. Blocks run strictly one after another; inside a block, rows are
//! split into fixed 8192-row **chunks** that are evaluated in parallel.
//! Chunks write into disjoint buffer slices and private partials, which are
//! folded in chunk order, and all contractions run sequentially — so results
//! are bit-identical across runs and across thread counts for a fixed plan.
//!
//! Two accumulation paths exist:
//!
//! * **Standard** stores every gradient and Hessian value for the block's
//!   rows, then contracts them against the design blocks with dense matrix
//!   products. Memory per block row scales with the Hessian pattern size.
//! * **Parsimonious** exploits intercept-only predictors (constant design
//!   columns): Hessian values whose predictors are both intercept-only fold
//!   into per-chunk scalars, values with one modelled predictor fold into
//!   per-chunk vectors, and only the values with two modelled predictors are
//!   stored for a dense contraction. The gradient streams into per-chunk
//!   vectors. With many intercept-only predictors this shrinks the per-row
//!   footprint roughly by the square of the modelled fraction.

use crate::kernel::{Kernel, PairPattern};
use crate::model::ModelSpec;
use crate::{Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::ops::Range;

/// Fixed number of rows per parallel chunk.
pub const CHUNK_ROWS: usize = 8192;

/// Terms kept ridge-free: attempts upper bound when sizing a plan.
const MIN_BUDGET_HINT: &str = "increase --memory-budget or reduce the model size";

/// Accumulation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    /// Store all per-row derivative values for each block, contract densely.
    Standard,
    /// Fold values involving intercept-only predictors on the fly.
    Parsimonious,
}

impl Path {
    /// Short identifier used in reports and benchmarks.
    pub fn name(self) -> &'static str {
        match self {
            Path::Standard => "standard",
            Path::Parsimonious => "parsimonious",
        }
    }
}

/// A sized execution plan: which rows form each block, and the buffer bytes
/// the largest block will allocate.
#[derive(Debug, Clone)]
pub struct Plan {
    pub path: Path,
    /// Contiguous row ranges, in order, covering `0..n`.
    pub block_ranges: Vec<Range<usize>>,
    /// Rows per parallel chunk within a block.
    pub chunk_rows: usize,
    /// Upper bound on the accumulation buffer bytes of any single block.
    pub bytes_estimate: usize,
}

impl Plan {
    /// Number of blocks.
    pub fn blocks(&self) -> usize {
        self.block_ranges.len()
    }

    /// Convenience plan: one block, no budget, standard path (tests, small fits).
    pub fn single<T: Scalar, K: Kernel<T>>(spec: &ModelSpec<T>, kernel: &K) -> Result<Plan> {
        plan_blocks(spec, kernel.pattern(), usize::MAX, Path::Standard, None)
    }
}

/// How one Hessian pattern slot is handled by the parsimonious path.
#[derive(Debug, Clone, Copy)]
enum Slot {
    /// Both predictors intercept-only: fold into a per-chunk scalar.
    Fixed(usize),
    /// Exactly one modelled predictor: fold into a per-chunk vector at the
    /// given flat offset; `dense_is_second` says which side is modelled.
    Mixed { off: usize, dense_is_second: bool },
    /// Both predictors modelled: store per-row, contract densely later.
    Stored(usize),
}

/// Pattern classification shared by planning and execution.
struct Classified {
    slots: Vec<Slot>,
    n_fixed: usize,
    n_stored: usize,
    /// Total length of the per-chunk mixed-pair accumulator.
    mixed_width: usize,
}

fn classify<T: Scalar>(spec: &ModelSpec<T>, pattern: &PairPattern) -> Classified {
    let io: Vec<bool> = spec.blocks.iter().map(|b| b.intercept_only()).collect();
    let mut slots = Vec::with_capacity(pattern.len());
    let (mut n_fixed, mut n_stored, mut mixed_width) = (0usize, 0usize, 0usize);
    for &(j, k) in pattern.pairs() {
        let (j, k) = (j as usize, k as usize);
        let slot = match (io[j], io[k]) {
            (true, true) => {
                n_fixed += 1;
                Slot::Fixed(n_fixed - 1)
            }
            (true, false) => {
                let off = mixed_width;
                mixed_width += spec.blocks[k].width();
                Slot::Mixed {
                    off,
                    dense_is_second: true,
                }
            }
            (false, true) => {
                let off = mixed_width;
                mixed_width += spec.blocks[j].width();
                Slot::Mixed {
                    off,
                    dense_is_second: false,
                }
            }
            (false, false) => {
                n_stored += 1;
                Slot::Stored(n_stored - 1)
            }
        };
        slots.push(slot);
    }
    Classified {
        slots,
        n_fixed,
        n_stored,
        mixed_width,
    }
}

/// Buffer bytes a block of `n_b` rows allocates under the given path.
fn block_bytes<T: Scalar>(
    spec: &ModelSpec<T>,
    pattern: &PairPattern,
    cls: &Classified,
    path: Path,
    n_b: usize,
    chunk_rows: usize,
) -> usize {
    let s = std::mem::size_of::<T>();
    let q = spec.layout.q;
    let p = spec.p_total();
    let max_p = spec.blocks.iter().map(|b| b.width()).max().unwrap_or(1);
    let chunks = n_b.div_ceil(chunk_rows);
    match path {
        // Per row: gradient (q) + pattern values + dense-contraction scratch
        // (max_p columns) + the column-gather vector. Per chunk: one
        // log-likelihood partial.
        Path::Standard => s * n_b * (q + pattern.len() + max_p + 1) + chunks * s,
        // Per row: stored pair values + scratch + gather. Per chunk: gradient
        // partial (p), one scalar per both-intercept pair, the mixed-pair
        // vectors, and a log-likelihood partial.
        Path::Parsimonious => {
            s * n_b * (cls.n_stored + max_p + 1)
                + chunks * s * (p + cls.n_fixed + cls.mixed_width + 1)
        }
    }
}

/// Size a plan: choose the number of blocks so that per-block buffers fit in
/// `budget_bytes`. `requested_blocks` overrides the block count, failing if
/// the resulting blocks would not fit the budget.
pub fn plan_blocks<T: Scalar>(
    spec: &ModelSpec<T>,
    pattern: &PairPattern,
    budget_bytes: usize,
    path: Path,
    requested_blocks: Option<usize>,
) -> Result<Plan> {
    let n = spec.n();
    if pattern.q() != spec.layout.q {
        return Err(Error::ShapeMismatch {
            what: "pattern predictor count",
            got: pattern.q(),
            expected: spec.layout.q,
        });
    }
    let cls = classify(spec, pattern);
    let fits = |n_b: usize| block_bytes(spec, pattern, &cls, path, n_b, CHUNK_ROWS) <= budget_bytes;

    let blocks = match requested_blocks {
        Some(0) => return Err(Error::Config("block count must be at least 1".into())),
        Some(b) => {
            if b > n {
                return Err(Error::Config(format!(
                    "requested {b} blocks but the data has only {n} rows"
                )));
            }
            let n_b = n.div_ceil(b);
            if !fits(n_b) {
                return Err(Error::Config(format!(
                    "requested {b} blocks need {} buffer bytes per block, over the budget of {budget_bytes}; {MIN_BUDGET_HINT}",
                    block_bytes(spec, pattern, &cls, path, n_b, CHUNK_ROWS)
                )));
            }
            b
        }
        None => {
            if !fits(1) {
                return Err(Error::Config(format!(
                    "even a single-row block needs {} buffer bytes, over the budget of {budget_bytes}; {MIN_BUDGET_HINT}",
                    block_bytes(spec, pattern, &cls, path, 1, CHUNK_ROWS)
                )));
            }
            // Largest block size within budget (block_bytes grows with n_b).
            let (mut lo, mut hi) = (1usize, n.max(1));
            while lo < hi {
                let mid = lo + (hi - lo + 1) / 2;
                if fits(mid) {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            n.max(1).div_ceil(lo)
        }
    };

    // Balanced contiguous ranges.
    let mut block_ranges = Vec::with_capacity(blocks);
    let base = n / blocks;
    let rem = n % blocks;
    let mut at = 0usize;
    for b in 0..blocks {
        let len = base + usize::from(b < rem);
        block_ranges.push(at..at + len);
        at += len;
    }
    debug_assert_eq!(at, n);
    let max_len = block_ranges.iter().map(|r| r.len()).max().unwrap_or(0);
    let bytes_estimate = block_bytes(spec, pattern, &cls, path, max_len, CHUNK_ROWS);
    Ok(Plan {
        path,
        block_ranges,
        chunk_rows: CHUNK_ROWS,
        bytes_estimate,
    })
}

/// Result of a full accumulation pass.
#[derive(Debug, Clone)]
pub struct Accumulated<T: Scalar> {
    /// Total log-likelihood (constant term omitted).
    pub loglik: T,
    /// Gradient of the log-likelihood in the coefficients, length `p`.
    pub grad: DVector<T>,
    /// Hessian of the log-likelihood in the coefficients, `p x p`, symmetric.
    pub hess: DMatrix<T>,
    /// Largest accumulation buffer footprint of any block, in bytes.
    pub peak_bytes: usize,
}

/// Scan chunk results in order and surface the error with the smallest
/// observation index (within a chunk the row scan already stops at the first
/// failure, and chunks partition rows in increasing order).
fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    for r in results {
        ok.push(r?);
    }
    Ok(ok)
}

/// Gather row `i` of the response matrix into `out`.
#[inline]
fn y_row<T: Scalar>(y: &DMatrix<T>, i: usize, out: &mut [T]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = y[(i, j)];
    }
}

/// Accumulate log-likelihood, gradient, and Hessian at the predictor values
/// `eta` (row-major `n x q`), following `plan`.
pub fn accumulate<T: Scalar, K: Kernel<T>>(
    spec: &ModelSpec<T>,
    kernel: &K,
    eta: &[T],
    plan: &Plan,
) -> Result<Accumulated<T>> {
    let n = spec.n();
    let q = spec.layout.q;
    let d = spec.layout.d;
    let p = spec.p_total();
    let pattern = kernel.pattern();
    if eta.len() != n * q {
        return Err(Error::ShapeMismatch {
            what: "eta buffer length",
            got: eta.len(),
            expected: n * q,
        });
    }
    if pattern.q() != q {
        return Err(Error::ShapeMismatch {
            what: "pattern predictor count",
            got: pattern.q(),
            expected: q,
        });
    }
    let cls = classify(spec, pattern);
    let max_p = spec.blocks.iter().map(|b| b.width()).max().unwrap_or(1);
    let n_b_max = plan.block_ranges.iter().map(|r| r.len()).max().unwrap_or(0);

    let mut hess = DMatrix::<T>::zeros(p, p);
    let mut grad = DVector::<T>::zeros(p);
    let mut loglik = T::zero();
    let mut peak_bytes = 0usize;

    // Shared contraction scratch, sized for the largest block.
    let mut wscr = DVector::<T>::zeros(n_b_max);
    let mut scale_scr = DMatrix::<T>::zeros(n_b_max, max_p);
    let mut vec_scr = DVector::<T>::zeros(max_p);

    for range in &plan.block_ranges {
        let n_b = range.len();
        if n_b == 0 {
            continue;
        }
        let used = block_bytes(spec, pattern, &cls, plan.path, n_b, plan.chunk_rows);
        peak_bytes = peak_bytes.max(used);
        let block_ll = match plan.path {
            Path::Standard => standard_block(
                spec, kernel, eta, range.clone(), plan.chunk_rows, &mut hess, &mut grad,
                &mut wscr, &mut scale_scr, &mut vec_scr,
            )?,
            Path::Parsimonious => parsimonious_block(
                spec, kernel, eta, range.clone(), plan.chunk_rows, &cls, &mut hess, &mut grad,
                &mut wscr, &mut scale_scr, &mut vec_scr,
            )?,
        };
        loglik += block_ll;
    }

    // Contractions only ever touch the upper block triangle; mirror it.
    for r in 0..p {
        for c in (r + 1)..p {
            hess[(c, r)] = hess[(r, c)];
        }
    }
    let _ = d;
    Ok(Accumulated {
        loglik,
        grad,
        hess,
        peak_bytes,
    })
}

/// Contract one dense-by-dense pair: `H[rj, rk] += X_j' diag(w) X_k` over the
/// block rows, using `scale_scr` for the row-scaled copy of `X_j`.
#[allow(clippy::too_many_arguments)]
fn contract_dense_pair<T: Scalar>(
    hess: &mut DMatrix<T>,
    xj: &DMatrix<T>,
    xk: &DMatrix<T>,
    rows: Range<usize>,
    rj: Range<usize>,
    rk: Range<usize>,
    w: &DVector<T>,
    scale_scr: &mut DMatrix<T>,
) {
    let n_b = rows.len();
    let pj = rj.len();
    let pk = rk.len();
    for c in 0..pj {
        for i in 0..n_b {
            scale_scr[(i, c)] = w[i] * xj[(rows.start + i, c)];
        }
    }
    let scaled = scale_scr.view((0, 0), (n_b, pj));
    let xk_view = xk.view((rows.start, 0), (n_b, pk));
    let mut target = hess.view_mut((rj.start, rk.start), (pj, pk));
    target.gemm_tr(T::one(), &scaled, &xk_view, T::one());
}

/// Standard path for one block: store all values, contract densely.
#[allow(clippy::too_many_arguments)]
fn standard_block<T: Scalar, K: Kernel<T>>(
    spec: &ModelSpec<T>,
    kernel: &K,
    eta: &[T],
    range: Range<usize>,
    chunk_rows: usize,
    hess: &mut DMatrix<T>,
    grad: &mut DVector<T>,
    wscr: &mut DVector<T>,
    scale_scr: &mut DMatrix<T>,
    vec_scr: &mut DVector<T>,
) -> Result<T> {
    let q = spec.layout.q;
    let d = spec.layout.d;
    let pattern = kernel.pattern();
    let np = pattern.len();
    let n_b = range.len();

    let mut grad_buf = vec![T::zero(); n_b * q];
    let mut pair_buf = vec![T::zero(); n_b * np];

    let results: Vec<Result<T>> = grad_buf
        .par_chunks_mut(chunk_rows * q)
        .zip(pair_buf.par_chunks_mut(chunk_rows * np))
        .enumerate()
        .map(|(ci, (gch, pch))| -> Result<T> {
            let mut ws = kernel.make_workspace();
            let mut yr = vec![T::zero(); d];
            let start = range.start + ci * chunk_rows;
            let rows = gch.len() / q;
            let mut ll = T::zero();
            for r in 0..rows {
                let i = start + r;
                y_row(&spec.y, i, &mut yr);
                let g = &mut gch[r * q..(r + 1) * q];
                let h = &mut pch[r * np..(r + 1) * np];
                ll += kernel
                    .eval(&mut ws, &eta[i * q..(i + 1) * q], &yr, g, Some(h))
                    .map_err(|e| e.with_row(i))?;
            }
            Ok(ll)
        })
        .collect();
    let partials = first_error(results)?;
    let mut block_ll = T::zero();
    for v in partials {
        block_ll += v;
    }

    // Gradient contraction: G[range_j] += X_j' g_j, one predictor at a time.
    for j in 0..q {
        for i in 0..n_b {
            wscr[i] = grad_buf[i * q + j];
        }
        let rj = spec.coef_range(j);
        let xj = spec.blocks[j]
            .columns
            .view((range.start, 0), (n_b, rj.len()));
        let w = wscr.rows_range(0..n_b);
        let mut target = grad.rows_range_mut(rj);
        target.gemv_tr(T::one(), &xj, &w, T::one());
    }

    // Hessian contraction, pair by pair in pattern order.
    let io: Vec<bool> = spec.blocks.iter().map(|b| b.intercept_only()).collect();
    for (pp, &(j, k)) in pattern.pairs().iter().enumerate() {
        let (j, k) = (j as usize, k as usize);
        for i in 0..n_b {
            wscr[i] = pair_buf[i * np + pp];
        }
        let rj = spec.coef_range(j);
        let rk = spec.coef_range(k);
        match (io[j], io[k]) {
            (true, true) => {
                let mut s = T::zero();
                for i in 0..n_b {
                    s += wscr[i];
                }
                hess[(rj.start, rk.start)] += s;
            }
            (true, false) => {
                let pk = rk.len();
                let xk = spec.blocks[k].columns.view((range.start, 0), (n_b, pk));
                let w = wscr.rows_range(0..n_b);
                let mut target = vec_scr.rows_range_mut(0..pk);
                target.gemv_tr(T::one(), &xk, &w, T::zero());
                for c in 0..pk {
                    hess[(rj.start, rk.start + c)] += vec_scr[c];
                }
            }
            (false, true) => {
                let pj = rj.len();
                let xj = spec.blocks[j].columns.view((range.start, 0), (n_b, pj));
                let w = wscr.rows_range(0..n_b);
                let mut target = vec_scr.rows_range_mut(0..pj);
                target.gemv_tr(T::one(), &xj, &w, T::zero());
                for c in 0..pj {
                    hess[(rj.start + c, rk.start)] += vec_scr[c];
                }
            }
            (false, false) => {
                let w_owned: DVector<T> = wscr.rows_range(0..n_b).into_owned();
                contract_dense_pair(
                    hess,
                    &spec.blocks[j].columns,
                    &spec.blocks[k].columns,
                    range.clone(),
                    rj,
                    rk,
                    &w_owned,
                    scale_scr,
                );
            }
        }
    }
    Ok(block_ll)
}

/// Per-chunk partial state of the parsimonious path.
struct ParsimPartial<T> {
    ll: T,
    grad: Vec<T>,
    fixed: Vec<T>,
    mixed: Vec<T>,
}

/// Parsimonious path for one block: stream everything that touches an
/// intercept-only predictor, store only dense-by-dense pair values.
#[allow(clippy::too_many_arguments)]
fn parsimonious_block<T: Scalar, K: Kernel<T>>(
    spec: &ModelSpec<T>,
    kernel: &K,
    eta: &[T],
    range: Range<usize>,
    chunk_rows: usize,
    cls: &Classified,
    hess: &mut DMatrix<T>,
    grad: &mut DVector<T>,
    wscr: &mut DVector<T>,
    scale_scr: &mut DMatrix<T>,
    _vec_scr: &mut DVector<T>,
) -> Result<T> {
    let q = spec.layout.q;
    let d = spec.layout.d;
    let p = spec.p_total();
    let pattern = kernel.pattern();
    let np = pattern.len();
    let n_b = range.len();
    let n_chunks = n_b.div_ceil(chunk_rows);
    let n_stored = cls.n_stored.max(1); // avoid zero-width chunking

    let mut stored_buf = vec![T::zero(); n_b * n_stored];
    let mut partials: Vec<ParsimPartial<T>> = (0..n_chunks)
        .map(|_| ParsimPartial {
            ll: T::zero(),
            grad: vec![T::zero(); p],
            fixed: vec![T::zero(); cls.n_fixed],
            mixed: vec![T::zero(); cls.mixed_width],
        })
        .collect();

    let results: Vec<Result<()>> = stored_buf
        .par_chunks_mut(chunk_rows * n_stored)
        .zip(partials.par_iter_mut())
        .enumerate()
        .map(|(ci, (sch, part))| -> Result<()> {
            let mut ws = kernel.make_workspace();
            let mut yr = vec![T::zero(); d];
            let mut grow = vec![T::zero(); q];
            let mut hrow = vec![T::zero(); np];
            let start = range.start + ci * chunk_rows;
            let rows = (chunk_rows).min(n_b - ci * chunk_rows);
            for r in 0..rows {
                let i = start + r;
                y_row(&spec.y, i, &mut yr);
                part.ll += kernel
                    .eval(
                        &mut ws,
                        &eta[i * q..(i + 1) * q],
                        &yr,
                        &mut grow,
                        Some(&mut hrow),
                    )
                    .map_err(|e| e.with_row(i))?;
                // Stream the gradient: G_partial += X_i' g_i.
                for j in 0..q {
                    let gj = grow[j];
                    let rj = spec.coef_range(j);
                    let block = &spec.blocks[j];
                    if block.intercept_only() {
                        part.grad[rj.start] += gj;
                    } else {
                        for (c, slot) in rj.enumerate() {
                            part.grad[slot] += gj * block.columns[(i, c)];
                        }
                    }
                }
                // Scatter the Hessian values.
                for (pp, &(j, k)) in pattern.pairs().iter().enumerate() {
                    let w = hrow[pp];
                    match cls.slots[pp] {
                        Slot::Fixed(fi) => part.fixed[fi] += w,
                        Slot::Mixed {
                            off,
                            dense_is_second,
                        } => {
                            let dense = if dense_is_second { k } else { j } as usize;
                            let cols = &spec.blocks[dense].columns;
                            let width = spec.blocks[dense].width();
                            for c in 0..width {
                                part.mixed[off + c] += w * cols[(i, c)];
                            }
                        }
                        Slot::Stored(si) => sch[r * n_stored + si] = w,
                    }
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;

    // Fold the per-chunk partials in chunk order.
    let mut block_ll = T::zero();
    let mut fixed_tot = vec![T::zero(); cls.n_fixed];
    let mut mixed_tot = vec![T::zero(); cls.mixed_width];
    for part in &partials {
        block_ll += part.ll;
        for (g, v) in grad.iter_mut().zip(&part.grad) {
            *g += *v;
        }
        for (t, v) in fixed_tot.iter_mut().zip(&part.fixed) {
            *t += *v;
        }
        for (t, v) in mixed_tot.iter_mut().zip(&part.mixed) {
            *t += *v;
        }
    }

    // Write folded values into the Hessian and contract stored pairs.
    for (pp, &(j, k)) in pattern.pairs().iter().enumerate() {
        let (j, k) = (j as usize, k as usize);
        let rj = spec.coef_range(j);
        let rk = spec.coef_range(k);
        match cls.slots[pp] {
            Slot::Fixed(fi) => hess[(rj.start, rk.start)] += fixed_tot[fi],
            Slot::Mixed {
                off,
                dense_is_second,
            } => {
                if dense_is_second {
                    for c in 0..rk.len() {
                        hess[(rj.start, rk.start + c)] += mixed_tot[off + c];
                    }
                } else {
                    for c in 0..rj.len() {
                        hess[(rj.start + c, rk.start)] += mixed_tot[off + c];
                    }
                }
            }
            Slot::Stored(si) => {
                for i in 0..n_b {
                    wscr[i] = stored_buf[i * n_stored + si];
                }
                let w_owned: DVector<T> = wscr.rows_range(0..n_b).into_owned();
                contract_dense_pair(
                    hess,
                    &spec.blocks[j].columns,
                    &spec.blocks[k].columns,
                    range.clone(),
                    rj,
                    rk,
                    &w_owned,
                    scale_scr,
                );
            }
        }
    }
    Ok(block_ll)
}

/// Accumulate only the log-likelihood at `eta` (used by line searches).
/// Parallel over fixed chunks; partials folded in chunk order.
pub fn accumulate_loglik<T: Scalar, K: Kernel<T>>(
    spec: &ModelSpec<T>,
    kernel: &K,
    eta: &[T],
) -> Result<T> {
    let n = spec.n();
    let q = spec.layout.q;
    let d = spec.layout.d;
    if eta.len() != n * q {
        return Err(Error::ShapeMismatch {
            what: "eta buffer length",
            got: eta.len(),
            expected: n * q,
        });
    }
    let n_chunks = n.div_ceil(CHUNK_ROWS).max(1);
    let results: Vec<Result<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| -> Result<T> {
            let mut ws = kernel.make_workspace();
            let mut yr = vec![T::zero(); d];
            let start = ci * CHUNK_ROWS;
            let end = (start + CHUNK_ROWS).min(n);
            let mut ll = T::zero();
            for i in start..end {
                y_row(&spec.y, i, &mut yr);
                ll += kernel
                    .loglik(&mut ws, &eta[i * q..(i + 1) * q], &yr)
                    .map_err(|e| e.with_row(i))?;
            }
            Ok(ll)
        })
        .collect();
    let partials = first_error(results)?;
    let mut total = T::zero();
    for v in partials {
        total += v;
    }
    Ok(total)
}
