//! Background ensemble matrix, its SVD and truncation.
//!
//! The ensemble matrix `V` (one mean-centered state per column) stands in
//! for the square root of the background error covariance `B = V V^T`,
//! which is never formed. The SVD is computed one-sidedly from the S x S
//! Gram matrix `V^T V`, since the sample count S is always far smaller than
//! the state size n. Everything here is read-only after construction.

mod io;

pub use io::{load_basis, save_basis};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::field::FieldSeries;

/// Singular values below `RANK_TOL * sigma_1` are treated as zero by the
/// generalized inverse and replaced by completion vectors in `U`.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReducedError {
    #[error("an ensemble needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("thin SVD needs n >= S, got {n} x {s}")]
    NotThin { n: usize, s: usize },
    #[error("truncation parameter {tau} outside 1..={s}")]
    TauOutOfRange { tau: usize, s: usize },
    #[error("observation index {idx} out of range for state size {n}")]
    IndexOutOfRange { idx: usize, n: usize },
    #[error("dimension mismatch: got {got}, want {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("eigendecomposition failed to converge")]
    EigenFailed,
}

/// Mean-centered ensemble matrix `V` (n x S) together with the sample mean
/// it was centered on.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundMatrix {
    v: DMatrix<f64>,
    mean: DVector<f64>,
}

impl BackgroundMatrix {
    /// Wraps an already-centered matrix. Columns are taken as given; the
    /// column-sum-zero property only holds when `mean` is the sample mean.
    pub fn from_parts(v: DMatrix<f64>, mean: DVector<f64>) -> Result<Self, ReducedError> {
        if v.ncols() < 2 {
            return Err(ReducedError::TooFewSamples(v.ncols()));
        }
        if mean.len() != v.nrows() {
            return Err(ReducedError::DimensionMismatch { got: mean.len(), want: v.nrows() });
        }
        if v.iter().any(|x| !x.is_finite()) || mean.iter().any(|x| !x.is_finite()) {
            return Err(ReducedError::NonFinite);
        }
        Ok(Self { v, mean })
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.v.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Column `i` as a contiguous slice (the storage is column-major).
    pub fn column(&self, i: usize) -> &[f64] {
        let n = self.v.nrows();
        &self.v.as_slice()[i * n..(i + 1) * n]
    }
}

/// Builds `V` from a training series: the mean is the column mean of the
/// states and each column is one state minus that mean.
pub fn build_background_matrix(train: &FieldSeries) -> Result<BackgroundMatrix, ReducedError> {
    let s = train.len();
    if s < 2 {
        return Err(ReducedError::TooFewSamples(s));
    }
    let n = train.grid().n();
    let mean = DVector::from_vec(crate::field::sample_mean(train));
    let mut v = DMatrix::zeros(n, s);
    for (j, step) in train.steps().iter().enumerate() {
        let mut col = v.column_mut(j);
        for (i, x) in step.values().iter().enumerate() {
            col[i] = x - mean[i];
        }
    }
    BackgroundMatrix::from_parts(v, mean)
}

/// Thin SVD factors `V = U Sigma W^T` with `U` n x S column-orthonormal,
/// `sigma` non-increasing and `Wt` S x S orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    wt: DMatrix<f64>,
}

impl SvdFactors {
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn wt(&self) -> &DMatrix<f64> {
        &self.wt
    }

    pub fn sample_count(&self) -> usize {
        self.sigma.len()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub(crate) fn from_parts(u: DMatrix<f64>, sigma: DVector<f64>, wt: DMatrix<f64>) -> Self {
        Self { u, sigma, wt }
    }
}

/// Computes the thin SVD of `V` through the symmetric eigendecomposition of
/// the S x S Gram matrix `V^T V`.
///
/// Ties in the spectrum keep their pre-sort order; the sign ambiguity is
/// resolved by making the largest-magnitude entry of each right singular
/// vector positive. Columns of `U` belonging to zero singular values are
/// filled with deterministic orthonormal completions.
pub fn compute_svd(bg: &BackgroundMatrix) -> Result<SvdFactors, ReducedError> {
    let v = &bg.v;
    let (n, s) = (v.nrows(), v.ncols());
    if n < s {
        return Err(ReducedError::NotThin { n, s });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ReducedError::NonFinite);
    }

    let mut gram = v.tr_mul(v);
    // Symmetrize to remove accumulation-order asymmetry before the solver.
    for i in 0..s {
        for j in 0..i {
            let avg = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = avg;
            gram[(j, i)] = avg;
        }
    }
    let eig = nalgebra::SymmetricEigen::try_new(gram, 1e-14, 0).ok_or(ReducedError::EigenFailed)?;

    // Descending eigenvalue order, stable over ties.
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut sigma = DVector::zeros(s);
    let mut w = DMatrix::zeros(s, s);
    for (rank, &src) in order.iter().enumerate() {
        sigma[rank] = eig.eigenvalues[src].max(0.0).sqrt();
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let mut pivot = 0;
        for i in 1..s {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        w.set_column(rank, &col);
    }

    let zero_tol = RANK_TOL * sigma[0];
    let mut u = DMatrix::zeros(n, s);
    let mut next_candidate = 0;
    for k in 0..s {
        let mut col = if sigma[k] > zero_tol {
            v * w.column(k) / sigma[k]
        } else {
            complete_column(&u, k, &mut next_candidate)
        };
        // Modified Gram-Schmidt against the previous columns keeps U
        // orthonormal even when the Gram spectrum is nearly degenerate.
        for prev in 0..k {
            let proj = u.column(prev).dot(&col);
            col.axpy(-proj, &u.column(prev).clone_owned(), 1.0);
        }
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        u.set_column(k, &col);
    }

    Ok(SvdFactors { u, sigma, wt: w.transpose() })
}

/// Deterministic orthonormal completion: the first unit basis vector with a
/// significant component outside the span of the existing columns.
fn complete_column(u: &DMatrix<f64>, cols: usize, next_candidate: &mut usize) -> DVector<f64> {
    let n = u.nrows();
    let orthogonalize = |idx: usize| {
        let mut cand = DVector::zeros(n);
        cand[idx] = 1.0;
        for prev in 0..cols {
            let proj = u.column(prev).dot(&cand);
            cand.axpy(-proj, &u.column(prev).clone_owned(), 1.0);
        }
        cand
    };
    while *next_candidate < n {
        let idx = *next_candidate;
        *next_candidate += 1;
        let cand = orthogonalize(idx);
        let norm = cand.norm();
        if norm > 0.5 {
            return cand / norm;
        }
    }
    // All preferred candidates sat too close to the span; take the best one.
    let mut best = (0usize, -1.0);
    for idx in 0..n {
        let norm = orthogonalize(idx).norm();
        if norm > best.1 {
            best = (idx, norm);
        }
    }
    let cand = orthogonalize(best.0);
    let norm = cand.norm();
    cand / norm
}

/// SVD factors with a truncation parameter and the ensemble mean carried
/// along for restoration.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedBasis {
    factors: SvdFactors,
    tau: usize,
    mean: DVector<f64>,
}

impl TruncatedBasis {
    pub fn factors(&self) -> &SvdFactors {
        &self.factors
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn n(&self) -> usize {
        self.factors.n()
    }

    pub fn sample_count(&self) -> usize {
        self.factors.sample_count()
    }

    /// The same factors and mean under a different truncation parameter.
    pub fn retruncate(&self, tau: usize) -> Result<Self, ReducedError> {
        let s = self.factors.sample_count();
        if tau == 0 || tau > s {
            return Err(ReducedError::TauOutOfRange { tau, s });
        }
        Ok(Self { factors: self.factors.clone(), tau, mean: self.mean.clone() })
    }

    /// Replaces the stored mean (zero by default when built via
    /// [`truncate`]).
    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self, ReducedError> {
        if mean.len() != self.factors.n() {
            return Err(ReducedError::DimensionMismatch {
                got: mean.len(),
                want: self.factors.n(),
            });
        }
        self.mean = mean;
        Ok(self)
    }

    pub(crate) fn from_parts(factors: SvdFactors, tau: usize, mean: DVector<f64>) -> Self {
        Self { factors, tau, mean }
    }

    fn zero_tol(&self) -> f64 {
        RANK_TOL * self.factors.sigma[0]
    }

    /// One row of the reconstruction `U Sigma_tau W^T`. This is the single
    /// algorithm behind both [`reconstruct_vtau`] and [`precompute_hv`], so
    /// subsampled rows are bit-identical to rows of the full reconstruction.
    fn reconstruct_row(&self, row: usize, out: &mut [f64]) {
        let s = self.factors.sample_count();
        for (j, o) in out.iter_mut().enumerate().take(s) {
            let mut acc = 0.0;
            for k in 0..self.tau {
                acc += self.factors.u[(row, k)] * self.factors.sigma[k] * self.factors.wt[(k, j)];
            }
            *o = acc;
        }
    }
}

/// Keeps the first `tau` modes of the decomposition. `tau = S` is allowed
/// and realizes the untruncated limit.
pub fn truncate(factors: SvdFactors, tau: usize) -> Result<TruncatedBasis, ReducedError> {
    let s = factors.sample_count();
    if tau == 0 || tau > s {
        return Err(ReducedError::TauOutOfRange { tau, s });
    }
    let n = factors.n();
    Ok(TruncatedBasis { factors, tau, mean: DVector::zeros(n) })
}

/// The largest rank whose singular value still satisfies
/// `sigma_tau >= sqrt(sigma_1)`, clamped to at least 1. A data-dependent
/// heuristic; exposed as an optional selector only.
pub fn select_tau_sqrt_sigma1(factors: &SvdFactors) -> usize {
    let threshold = factors.sigma[0].sqrt();
    let mut tau = 0;
    for i in 0..factors.sample_count() {
        if factors.sigma[i] >= threshold {
            tau = i + 1;
        } else {
            break;
        }
    }
    tau.max(1)
}

/// `x = V_tau w`, evaluated through the factors in O(S^2 + n tau).
pub fn apply_basis(basis: &TruncatedBasis, w: &[f64]) -> Result<Vec<f64>, ReducedError> {
    let s = basis.factors.sample_count();
    if w.len() != s {
        return Err(ReducedError::DimensionMismatch { got: w.len(), want: s });
    }
    let t = &basis.factors.wt * DVector::from_column_slice(w);
    let mut scaled = DVector::zeros(basis.tau);
    for k in 0..basis.tau {
        scaled[k] = basis.factors.sigma[k] * t[k];
    }
    let x = basis.factors.u.columns(0, basis.tau) * scaled;
    Ok(x.as_slice().to_vec())
}

/// `w = V_tau^+ x` via the generalized inverse `W Sigma_tau^+ U^T`; only
/// singular values above the zero threshold are inverted.
pub fn apply_pinv(basis: &TruncatedBasis, x: &[f64]) -> Result<Vec<f64>, ReducedError> {
    let n = basis.factors.n();
    if x.len() != n {
        return Err(ReducedError::DimensionMismatch { got: x.len(), want: n });
    }
    let zero_tol = basis.zero_tol();
    let xt = basis.factors.u.columns(0, basis.tau).tr_mul(&DVector::from_column_slice(x));
    let mut t = DVector::zeros(basis.tau);
    for k in 0..basis.tau {
        t[k] = if basis.factors.sigma[k] > zero_tol { xt[k] / basis.factors.sigma[k] } else { 0.0 };
    }
    let w = basis.factors.wt.rows(0, basis.tau).tr_mul(&t);
    Ok(w.as_slice().to_vec())
}

/// Full reconstruction `V_tau = U Sigma_tau W^T`, row by row.
pub fn reconstruct_vtau(basis: &TruncatedBasis) -> DMatrix<f64> {
    let (n, s) = (basis.factors.n(), basis.factors.sample_count());
    let mut out = DMatrix::zeros(n, s);
    let mut row = vec![0.0; s];
    for i in 0..n {
        basis.reconstruct_row(i, &mut row);
        for j in 0..s {
            out[(i, j)] = row[j];
        }
    }
    out
}

/// Precomputes `H V_tau` for a row-selection observation operator; `None`
/// selects every row (identity H). Rows are produced by the same routine as
/// [`reconstruct_vtau`], so selection is bit-exact.
pub fn precompute_hv(
    basis: &TruncatedBasis,
    rows: Option<&[usize]>,
) -> Result<DMatrix<f64>, ReducedError> {
    let (n, s) = (basis.factors.n(), basis.factors.sample_count());
    let mut row_buf = vec![0.0; s];
    match rows {
        None => Ok(reconstruct_vtau(basis)),
        Some(indices) => {
            let mut out = DMatrix::zeros(indices.len(), s);
            for (r, &idx) in indices.iter().enumerate() {
                if idx >= n {
                    return Err(ReducedError::IndexOutOfRange { idx, n });
                }
                basis.reconstruct_row(idx, &mut row_buf);
                for j in 0..s {
                    out[(r, j)] = row_buf[j];
                }
            }
            Ok(out)
        }
    }
}
