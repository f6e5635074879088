//! Index bookkeeping between the `q = d + d(d+1)/2` linear predictors of one
//! observation and the symmetric matrix `Theta` they parametrise.
//!
//! Predictor order (0-based index `j`):
//!
//! * `0..d` — means, component `j`;
//! * `d..2d` — diagonal entries `Theta[j-d, j-d]`;
//! * `2d..q` — strict lower triangle of `Theta` in row-wise order:
//!   `(1,0), (2,0), (2,1), (3,0), ...` (rows and columns 0-based).
//!
//! The same row-wise ("rvech") order, with the diagonal included, is the
//! canonical serialization order for covariance matrices ([`rvech_lower`]).

use crate::{Error, Result, Scalar};
use nalgebra::DMatrix;

/// Kind of quantity a predictor index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Mean of component `j`.
    Mean(usize),
    /// Diagonal entry `Theta[j, j]`.
    Diag(usize),
    /// Strict lower entry `Theta[row, col]`, `row > col`.
    Lower { row: usize, col: usize },
}

/// Index maps between predictor slots and entries of `Theta` for a given
/// response dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    /// Response dimension `d >= 1`.
    pub d: usize,
    /// Number of linear predictors, `q = d + d(d+1)/2`.
    pub q: usize,
    /// Column (0-based) of the `m`-th strict-lower slot; `z[m] < w[m]`.
    pub z: Vec<usize>,
    /// Row (0-based) of the `m`-th strict-lower slot.
    pub w: Vec<usize>,
}

impl ThetaLayout {
    /// Build the layout for response dimension `d`.
    pub fn new(d: usize) -> Result<Self> {
        if d < 1 {
            return Err(Error::InvalidDimension(d));
        }
        let q = d + d * (d + 1) / 2;
        let mut z = Vec::with_capacity(d * (d - 1) / 2);
        let mut w = Vec::with_capacity(d * (d - 1) / 2);
        for row in 1..d {
            for col in 0..row {
                z.push(col);
                w.push(row);
            }
        }
        Ok(ThetaLayout { d, q, z, w })
    }

    /// Number of strict-lower slots, `d(d-1)/2`.
    pub fn n_offdiag(&self) -> usize {
        self.z.len()
    }

    /// Predictor index of the mean of component `j`.
    pub fn mean_index(&self, j: usize) -> usize {
        debug_assert!(j < self.d);
        j
    }

    /// Predictor index of the diagonal slot `Theta[j, j]`.
    pub fn diag_index(&self, j: usize) -> usize {
        debug_assert!(j < self.d);
        self.d + j
    }

    /// Predictor index of the strict-lower slot `Theta[row, col]`
    /// (`row > col`, both 0-based).
    pub fn lower_index(&self, row: usize, col: usize) -> usize {
        debug_assert!(col < row && row < self.d);
        2 * self.d + row * (row - 1) / 2 + col
    }

    /// What predictor index `j` refers to.
    pub fn slot_kind(&self, j: usize) -> SlotKind {
        debug_assert!(j < self.q);
        if j < self.d {
            SlotKind::Mean(j)
        } else if j < 2 * self.d {
            SlotKind::Diag(j - self.d)
        } else {
            let m = j - 2 * self.d;
            SlotKind::Lower {
                row: self.w[m],
                col: self.z[m],
            }
        }
    }

    /// Assemble the symmetric matrix `Theta` from one predictor row.
    pub fn theta_from_eta<T: Scalar>(&self, eta: &[T]) -> Result<DMatrix<T>> {
        if eta.len() != self.q {
            return Err(Error::ShapeMismatch {
                what: "predictor vector length",
                got: eta.len(),
                expected: self.q,
            });
        }
        let d = self.d;
        let mut theta = DMatrix::zeros(d, d);
        for j in 0..d {
            theta[(j, j)] = eta[d + j];
        }
        for m in 0..self.n_offdiag() {
            let (r, c) = (self.w[m], self.z[m]);
            theta[(r, c)] = eta[2 * d + m];
            theta[(c, r)] = eta[2 * d + m];
        }
        Ok(theta)
    }
}

/// Row-wise half-vectorization of the lower triangle (diagonal included):
/// `(0,0), (1,0), (1,1), (2,0), (2,1), (2,2), ...`. This is the canonical
/// order for serializing symmetric matrices.
pub fn rvech_lower<T: Scalar>(mat: &DMatrix<T>) -> Vec<T> {
    let d = mat.nrows();
    debug_assert_eq!(d, mat.ncols());
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for row in 0..d {
        for col in 0..=row {
            out.push(mat[(row, col)]);
        }
    }
    out
}
