//! Cost functions, solvers, and the two assimilation pipelines.
//!
//! Both formulations minimize the same quadratic,
//!
//! ```text
//! J(w) = 1/2 w^T w + 1/2 sigma^-2 |d - G w|^2
//! ```
//!
//! with `(G, d, sigma) = (H V_tau, y - H x_b, sigma_0)` in the reduced space
//! and `(V_l, d_l, sigma_l)` in the bi-reduced (latent) space, so one cost,
//! gradient and minimizer implementation serves both and timing comparisons
//! are apples to apples.
//!
//! Pipelines run in normalized, mean-centered coordinates where the
//! background state is the zero vector; restoration adds the ensemble mean
//! back and undoes the normalization. Following the paper's timing protocol,
//! the online clock starts when minimization starts: misfit encoding is
//! problem assembly and happens before the clock.

mod lbfgs;

pub use lbfgs::{minimize_lbfgs, LbfgsDiagnostics, LbfgsOptions};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distributions::Distribution;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::codec::{Codec, CodecError};
use crate::field::{invert_normalization, FieldError, Grid3, NormStats, StateField};
use crate::reduced::{apply_basis, precompute_hv, BackgroundMatrix, ReducedError, TruncatedBasis};
use crate::rng;

#[derive(Debug, Error)]
pub enum AssimError {
    #[error("observation count {m} outside 1..={n}")]
    BadObservationCount { m: usize, n: usize },
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("dimension mismatch: got {got}, want {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("observation indices must be strictly increasing and in range")]
    BadIndices,
    #[error("the bi-reduced path requires the identity observation operator")]
    NonIdentityOperator,
    #[error("observation operator does not match the prepared context")]
    OperatorMismatch,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("linear system is not positive definite")]
    SolveFailed,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Map from state space (size n) to observation space (size M): the
/// identity or a row subsample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObservationOperator {
    Identity { n: usize },
    Subsample { n: usize, indices: Vec<usize> },
}

impl ObservationOperator {
    pub fn identity(n: usize) -> Self {
        Self::Identity { n }
    }

    /// Builds a subsample operator; indices must be unique and in range and
    /// are stored sorted.
    pub fn subsample(n: usize, mut indices: Vec<usize>) -> Result<Self, AssimError> {
        if indices.is_empty() || indices.len() > n {
            return Err(AssimError::BadObservationCount { m: indices.len(), n });
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) || *indices.last().unwrap() >= n {
            return Err(AssimError::BadIndices);
        }
        Ok(Self::Subsample { n, indices })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Identity { n } => *n,
            Self::Subsample { n, .. } => *n,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Identity { n } => *n,
            Self::Subsample { indices, .. } => indices.len(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity { .. })
    }

    /// Row indices, `None` for the identity.
    pub fn indices(&self) -> Option<&[usize]> {
        match self {
            Self::Identity { .. } => None,
            Self::Subsample { indices, .. } => Some(indices),
        }
    }

    /// `H x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, AssimError> {
        if x.len() != self.state_dim() {
            return Err(AssimError::DimensionMismatch { got: x.len(), want: self.state_dim() });
        }
        Ok(match self {
            Self::Identity { .. } => x.to_vec(),
            Self::Subsample { indices, .. } => indices.iter().map(|&i| x[i]).collect(),
        })
    }
}

/// Observed values with their operator and assumed error level; the error
/// covariance is `sigma0^2 I`, applied as a scalar and never materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub operator: ObservationOperator,
    pub values: Vec<f64>,
    pub sigma0: f64,
}

impl ObservationSet {
    pub fn new(
        operator: ObservationOperator,
        values: Vec<f64>,
        sigma0: f64,
    ) -> Result<Self, AssimError> {
        if values.len() != operator.obs_dim() {
            return Err(AssimError::DimensionMismatch {
                got: values.len(),
                want: operator.obs_dim(),
            });
        }
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(AssimError::BadSigma(sigma0));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AssimError::NonFinite("observation values"));
        }
        Ok(Self { operator, values, sigma0 })
    }
}

/// Samples `m_count` distinct locations of `x_truth` (uniformly, seeded) and
/// optionally perturbs them with Gaussian noise of standard deviation
/// `sigma0`. `m_count = n` yields the identity operator.
pub fn build_observations(
    x_truth: &StateField,
    m_count: usize,
    sigma0: f64,
    noise: bool,
    seed: u64,
) -> Result<ObservationSet, AssimError> {
    let n = x_truth.grid().n();
    if m_count == 0 || m_count > n {
        return Err(AssimError::BadObservationCount { m: m_count, n });
    }
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(AssimError::BadSigma(sigma0));
    }
    let mut rng = rng::stream(seed);
    let operator = if m_count == n {
        ObservationOperator::identity(n)
    } else {
        let mut indices = rand::seq::index::sample(&mut rng, n, m_count).into_vec();
        indices.sort_unstable();
        ObservationOperator::Subsample { n, indices }
    };
    let mut values = operator.apply(x_truth.values())?;
    if noise {
        for v in &mut values {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma0 * z;
        }
    }
    ObservationSet::new(operator, values, sigma0)
}

/// Misfit `d = y - H x_b`. With mean-centered coordinates `x_b = 0` and the
/// misfit reduces to the observation vector itself.
pub fn misfit(obs: &ObservationSet, x_b: &[f64]) -> Result<Vec<f64>, AssimError> {
    let hx = obs.operator.apply(x_b)?;
    Ok(obs.values.iter().zip(&hx).map(|(y, h)| y - h).collect())
}

/// Latent ensemble `V_l = f(V)`: every column of `V` encoded, an m x S
/// matrix.
pub fn latent_background(
    codec: &dyn Codec,
    bg: &BackgroundMatrix,
) -> Result<DMatrix<f64>, AssimError> {
    if codec.input_dim() != bg.n() {
        return Err(AssimError::DimensionMismatch { got: codec.input_dim(), want: bg.n() });
    }
    let s = bg.sample_count();
    let m = codec.latent_dim();
    let mut v_l = DMatrix::zeros(m, s);
    for j in 0..s {
        let z = codec.encode(bg.column(j))?;
        for (i, zi) in z.iter().enumerate() {
            v_l[(i, j)] = *zi;
        }
    }
    Ok(v_l)
}

/// Latent misfit `d_l = f(y)`. Requires the identity operator: with a
/// subsampled H the latent misfit would need a trained observation encoder,
/// which is out of scope.
pub fn latent_misfit(codec: &dyn Codec, obs: &ObservationSet) -> Result<Vec<f64>, AssimError> {
    if !obs.operator.is_identity() {
        return Err(AssimError::NonIdentityOperator);
    }
    Ok(codec.encode(&obs.values)?)
}

/// The shared quadratic cost `J(w) = 1/2 w^T w + 1/2 sigma^-2 |d - G w|^2`.
///
/// `G` is `H V_tau` (M x S) for the reduced space and `V_l` (m x S) for the
/// bi-reduced space.
#[derive(Debug, Clone)]
pub struct QuadraticProblem<'a> {
    g: &'a DMatrix<f64>,
    d: DVector<f64>,
    inv_var: f64,
}

impl<'a> QuadraticProblem<'a> {
    pub fn new(g: &'a DMatrix<f64>, d: Vec<f64>, sigma: f64) -> Result<Self, AssimError> {
        if d.len() != g.nrows() {
            return Err(AssimError::DimensionMismatch { got: d.len(), want: g.nrows() });
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(AssimError::BadSigma(sigma));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(AssimError::NonFinite("misfit"));
        }
        Ok(Self { g, d: DVector::from_vec(d), inv_var: 1.0 / (sigma * sigma) })
    }

    /// Weight-space dimension S.
    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    /// Cost and gradient at `w`: `grad = w - sigma^-2 G^T (d - G w)`.
    pub fn cost_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        debug_assert_eq!(w.len(), self.dim());
        let wv = DVector::from_column_slice(w);
        let mut residual = self.d.clone();
        residual.gemv(-1.0, self.g, &wv, 1.0);
        let cost = 0.5 * wv.norm_squared() + 0.5 * self.inv_var * residual.norm_squared();
        let mut grad = wv;
        grad.gemv_tr(-self.inv_var, self.g, &residual, 1.0);
        (cost, grad.as_slice().to_vec())
    }

    /// `A = sigma^-2 G^T G`, the data term of the Hessian.
    pub fn matrix_a(&self) -> DMatrix<f64> {
        self.g.tr_mul(self.g) * self.inv_var
    }

    /// `b = sigma^-2 G^T d`, the right-hand side of the normal equations.
    pub fn vector_b(&self) -> DVector<f64> {
        self.g.tr_mul(&self.d) * self.inv_var
    }

    /// Spectral condition number of the Hessian `I + A`.
    pub fn hessian_condition(&self) -> f64 {
        let eig = nalgebra::SymmetricEigen::new(self.matrix_a());
        let lmax = eig.eigenvalues.max().max(0.0);
        let lmin = eig.eigenvalues.min().max(0.0);
        (1.0 + lmax) / (1.0 + lmin)
    }
}

/// Direct solution of the stationarity system `(I + A) w = b` by Cholesky
/// factorization with iterative refinement until the residual drops below
/// `1e-10 |b|`.
pub fn solve_closed_form(problem: &QuadraticProblem<'_>) -> Result<Vec<f64>, AssimError> {
    let s = problem.dim();
    let mut h = problem.matrix_a();
    for i in 0..s {
        h[(i, i)] += 1.0;
    }
    let b = problem.vector_b();
    let chol = nalgebra::Cholesky::new(h.clone()).ok_or(AssimError::SolveFailed)?;
    let mut w = chol.solve(&b);
    let b_norm = b.norm().max(f64::MIN_POSITIVE);
    for _ in 0..3 {
        let mut residual = b.clone();
        residual.gemv(-1.0, &h, &w, 1.0);
        if residual.norm() <= 1e-10 * b_norm {
            break;
        }
        w += chol.solve(&residual);
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(AssimError::NonFinite("closed-form solution"));
    }
    Ok(w.as_slice().to_vec())
}

/// Which solver a pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    #[default]
    Lbfgs,
    ClosedForm,
}

/// Pipeline-level solver options.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveOptions {
    pub solver: SolverKind,
    pub lbfgs: LbfgsOptions,
}

/// Everything an assimilation run produces.
#[derive(Debug, Clone)]
pub struct Solution {
    /// Optimal reduced-space weights (length S for both pipelines).
    pub weights: Vec<f64>,
    /// Restored absolute state: mean added back, normalization undone.
    pub x_da: StateField,
    pub cost_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub iterations: usize,
    pub fn_evals: usize,
    pub converged: bool,
    /// Problem assembly (misfit / latent misfit) time; outside the online
    /// clock.
    pub prepare_s: f64,
    pub minimize_s: f64,
    pub restore_s: f64,
    /// Online wall time: minimize + restore, clock started at minimization.
    pub total_s: f64,
}

fn run_solver(
    problem: &QuadraticProblem<'_>,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize, usize, bool), AssimError> {
    match opts.solver {
        SolverKind::Lbfgs => {
            let (w, diag) =
                minimize_lbfgs(|w| problem.cost_grad(w), vec![0.0; problem.dim()], &opts.lbfgs);
            Ok((w, diag.cost_history, diag.grad_norm_history, diag.iterations, diag.fn_evals, diag.converged))
        }
        SolverKind::ClosedForm => {
            let w = solve_closed_form(problem)?;
            let (c0, g0) = problem.cost_grad(&vec![0.0; problem.dim()]);
            let (c1, g1) = problem.cost_grad(&w);
            let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            Ok((w, vec![c0, c1], vec![inf(&g0), inf(&g1)], 0, 2, true))
        }
    }
}

/// Reduced-space pipeline context: basis plus the precomputed `H V_tau` for
/// one observation operator. Building it is offline cost.
pub struct MonoContext<'a> {
    basis: &'a TruncatedBasis,
    stats: &'a NormStats,
    grid: Grid3,
    operator: ObservationOperator,
    hv: DMatrix<f64>,
}

impl<'a> MonoContext<'a> {
    pub fn new(
        basis: &'a TruncatedBasis,
        stats: &'a NormStats,
        grid: Grid3,
        operator: ObservationOperator,
    ) -> Result<Self, AssimError> {
        if grid.n() != basis.n() {
            return Err(AssimError::DimensionMismatch { got: grid.n(), want: basis.n() });
        }
        if operator.state_dim() != basis.n() {
            return Err(AssimError::DimensionMismatch {
                got: operator.state_dim(),
                want: basis.n(),
            });
        }
        let hv = precompute_hv(basis, operator.indices())?;
        Ok(Self { basis, stats, grid, operator, hv })
    }

    pub fn hv(&self) -> &DMatrix<f64> {
        &self.hv
    }

    /// Assimilates one observation set against the zero background (the
    /// coordinates are mean-centered).
    pub fn assimilate(
        &self,
        obs: &ObservationSet,
        opts: &SolveOptions,
    ) -> Result<Solution, AssimError> {
        if obs.operator != self.operator {
            return Err(AssimError::OperatorMismatch);
        }
        let t_prep = Instant::now();
        let x_b = vec![0.0; self.basis.n()];
        let d = misfit(obs, &x_b)?;
        let problem = QuadraticProblem::new(&self.hv, d, obs.sigma0)?;
        let prepare_s = t_prep.elapsed().as_secs_f64();

        let t_online = Instant::now();
        let (w, cost_history, grad_norm_history, iterations, fn_evals, converged) =
            run_solver(&problem, opts)?;
        let minimize_s = t_online.elapsed().as_secs_f64();

        let t_restore = Instant::now();
        let dx = apply_basis(self.basis, &w)?;
        let x_da = restore_absolute(&dx, self.basis.mean(), self.stats, self.grid)?;
        let restore_s = t_restore.elapsed().as_secs_f64();

        Ok(Solution {
            weights: w,
            x_da,
            cost_history,
            grad_norm_history,
            iterations,
            fn_evals,
            converged,
            prepare_s,
            minimize_s,
            restore_s,
            total_s: t_online.elapsed().as_secs_f64(),
        })
    }
}

/// Bi-reduced-space pipeline context: codec plus the precomputed latent
/// ensemble `V_l` and the latent error level. Building it is offline cost.
pub struct BiContext<'a> {
    codec: &'a dyn Codec,
    stats: &'a NormStats,
    grid: Grid3,
    mean: DVector<f64>,
    v_l: DMatrix<f64>,
    sigma_l: Option<f64>,
}

impl<'a> BiContext<'a> {
    /// `sigma_l = None` defaults the latent error level to each observation
    /// set's own `sigma0`.
    pub fn new(
        codec: &'a dyn Codec,
        bg: &BackgroundMatrix,
        stats: &'a NormStats,
        grid: Grid3,
        sigma_l: Option<f64>,
    ) -> Result<Self, AssimError> {
        if grid.n() != bg.n() {
            return Err(AssimError::DimensionMismatch { got: grid.n(), want: bg.n() });
        }
        if let Some(s) = sigma_l {
            if !(s > 0.0) || !s.is_finite() {
                return Err(AssimError::BadSigma(s));
            }
        }
        let v_l = latent_background(codec, bg)?;
        Ok(Self { codec, stats, grid, mean: bg.mean().clone(), v_l, sigma_l })
    }

    pub fn v_l(&self) -> &DMatrix<f64> {
        &self.v_l
    }

    fn effective_sigma(&self, obs: &ObservationSet) -> f64 {
        self.sigma_l.unwrap_or(obs.sigma0)
    }

    /// Assimilates one full-state observation set.
    pub fn assimilate(
        &self,
        obs: &ObservationSet,
        opts: &SolveOptions,
    ) -> Result<Solution, AssimError> {
        let t_prep = Instant::now();
        let d_l = latent_misfit(self.codec, obs)?;
        let problem = QuadraticProblem::new(&self.v_l, d_l, self.effective_sigma(obs))?;
        let prepare_s = t_prep.elapsed().as_secs_f64();

        let t_online = Instant::now();
        let (w, cost_history, grad_norm_history, iterations, fn_evals, converged) =
            run_solver(&problem, opts)?;
        let minimize_s = t_online.elapsed().as_secs_f64();

        let t_restore = Instant::now();
        let dx = restore_bi(self.codec, &self.v_l, &w)?;
        let x_da = restore_absolute(&dx, &self.mean, self.stats, self.grid)?;
        let restore_s = t_restore.elapsed().as_secs_f64();

        Ok(Solution {
            weights: w,
            x_da,
            cost_history,
            grad_norm_history,
            iterations,
            fn_evals,
            converged,
            prepare_s,
            minimize_s,
            restore_s,
            total_s: t_online.elapsed().as_secs_f64(),
        })
    }
}

/// `delta_x = V_tau w` (linear in `w`).
pub fn restore_mono(basis: &TruncatedBasis, w: &[f64]) -> Result<Vec<f64>, AssimError> {
    Ok(apply_basis(basis, w)?)
}

/// Two-stage restoration `delta_x = g(V_l w_l)`: reduced weights to latent
/// vector, then decode.
pub fn restore_bi(
    codec: &dyn Codec,
    v_l: &DMatrix<f64>,
    w_l: &[f64],
) -> Result<Vec<f64>, AssimError> {
    if w_l.len() != v_l.ncols() {
        return Err(AssimError::DimensionMismatch { got: w_l.len(), want: v_l.ncols() });
    }
    let z = v_l * DVector::from_column_slice(w_l);
    Ok(codec.decode(z.as_slice())?)
}

fn restore_absolute(
    dx: &[f64],
    mean: &DVector<f64>,
    stats: &NormStats,
    grid: Grid3,
) -> Result<StateField, AssimError> {
    let values: Vec<f64> = dx.iter().zip(mean.iter()).map(|(d, m)| d + m).collect();
    let centered = StateField::new(grid, values)?;
    Ok(invert_normalization(&centered, stats)?)
}

/// One-call reduced-space assimilation (context built internally; prefer
/// [`MonoContext`] when the operator is reused across steps).
pub fn assimilate_mono(
    basis: &TruncatedBasis,
    stats: &NormStats,
    grid: Grid3,
    obs: &ObservationSet,
    opts: &SolveOptions,
) -> Result<Solution, AssimError> {
    MonoContext::new(basis, stats, grid, obs.operator.clone())?.assimilate(obs, opts)
}

/// One-call bi-reduced-space assimilation (context built internally; prefer
/// [`BiContext`] when assimilating many steps).
pub fn assimilate_bi(
    codec: &dyn Codec,
    bg: &BackgroundMatrix,
    stats: &NormStats,
    grid: Grid3,
    obs: &ObservationSet,
    sigma_l: Option<f64>,
    opts: &SolveOptions,
) -> Result<Solution, AssimError> {
    BiContext::new(codec, bg, stats, grid, sigma_l)?.assimilate(obs, opts)
}

#[cfg(test)]
mod tests;
