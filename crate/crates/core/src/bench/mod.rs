//! Metrics, tradeoff sweeps and the timing harness.
//!
//! Accuracy cells may run in parallel (their randomness is seeded per cell,
//! so outputs are schedule-independent); timing sweeps run strictly serially
//! on one thread with median-of-repetitions wall times.

mod report;

pub use report::{export_report, import_report};

use rayon::prelude::*;
use thiserror::Error;

use crate::assim::{
    AssimError, BiContext, MonoContext, ObservationOperator, ObservationSet, SolveOptions,
    Solution,
};
use crate::codec::Codec;
use crate::field::{
    apply_normalization, invert_normalization, FieldSeries, NormStats, StateField,
};
use crate::reduced::TruncatedBasis;
use crate::rng;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference state has zero norm; the relative error metric is undefined")]
    ZeroNorm,
    #[error("length mismatch: got {got}, want {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("sweep configuration invalid: {0}")]
    BadConfig(&'static str),
    #[error("bi pipeline requested but no codec supplied")]
    MissingCodec,
    #[error(transparent)]
    Assim(#[from] AssimError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Reduced(#[from] crate::reduced::ReducedError),
    #[error(transparent)]
    Format(#[from] crate::field::FormatError),
    #[error("report parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Which formulation a sweep cell ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Mono,
    Bi,
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PipelineKind::Mono => "mono",
            PipelineKind::Bi => "bi",
        })
    }
}

impl std::str::FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mono" => Ok(PipelineKind::Mono),
            "bi" => Ok(PipelineKind::Bi),
            other => Err(format!("unknown pipeline {other:?}")),
        }
    }
}

/// One report row: a per-step measurement (`step >= 0`) or a cell aggregate
/// (`step = -1`, metric fields averaged over the cell's steps).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub pipeline: PipelineKind,
    /// Truncation parameter of the cell; 0 on bi rows, where it does not
    /// apply.
    pub tau: usize,
    pub m_obs: usize,
    pub sigma0: f64,
    pub step: i64,
    pub da_mse: f64,
    pub ref_mse: f64,
    /// Minimizer iterations (fractional on aggregate rows).
    pub iterations: f64,
    pub minimize_s: f64,
    pub restore_s: f64,
    pub total_s: f64,
    pub converged: bool,
}

/// Relative L2 analysis error `|x_da - x_obs| / |x_obs|`. Called "DA MSE"
/// in the reports for continuity with the literature, although it is a
/// relative norm rather than a mean squared error.
pub fn da_mse(x_da: &[f64], x_obs: &[f64]) -> Result<f64, MetricError> {
    if x_da.len() != x_obs.len() {
        return Err(MetricError::LengthMismatch { got: x_da.len(), want: x_obs.len() });
    }
    let obs_norm = x_obs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if obs_norm == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    let diff = x_da
        .iter()
        .zip(x_obs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / obs_norm)
}

/// The same metric for the background state ("ref MSE"): the error of the
/// baseline that always predicts the historical mean.
pub fn ref_mse(x_b: &[f64], x_obs: &[f64]) -> Result<f64, MetricError> {
    da_mse(x_b, x_obs)
}

/// Median wall times of a repeated pipeline call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineTiming {
    pub minimize_s: f64,
    pub restore_s: f64,
    pub total_s: f64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs an assimilation call `reps` times and reports the median of each
/// online timing component; the solution of the first run is returned
/// (accuracy outputs are identical across repetitions).
pub fn time_online<F>(reps: usize, mut call: F) -> Result<(Solution, OnlineTiming), AssimError>
where
    F: FnMut() -> Result<Solution, AssimError>,
{
    let reps = reps.max(1);
    let first = call()?;
    let mut minimize = vec![first.minimize_s];
    let mut restore = vec![first.restore_s];
    let mut total = vec![first.total_s];
    for _ in 1..reps {
        let sol = call()?;
        minimize.push(sol.minimize_s);
        restore.push(sol.restore_s);
        total.push(sol.total_s);
    }
    let timing = OnlineTiming {
        minimize_s: median(minimize),
        restore_s: median(restore),
        total_s: median(total),
    };
    Ok((first, timing))
}

/// Sweep grid: every listed truncation and observation count, per pipeline.
/// Observation counts may be absolute (`> 1`) or fractions of n (`<= 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub tau_list: Vec<usize>,
    pub m_list: Vec<f64>,
    pub sigma0: f64,
    pub pipelines: Vec<PipelineKind>,
    /// Per-step timing repetitions (median taken); 1 for accuracy sweeps.
    pub repetitions: usize,
    pub seed: u64,
    /// Adds Gaussian noise of std `sigma0` to the sampled observations.
    pub noise: bool,
    /// Strictly serial execution for trustworthy wall times.
    pub timing_mode: bool,
}

impl SweepConfig {
    fn validate(&self, n: usize, s: usize) -> Result<(), MetricError> {
        if self.tau_list.is_empty() {
            return Err(MetricError::BadConfig("tau list is empty"));
        }
        if self.m_list.is_empty() {
            return Err(MetricError::BadConfig("observation list is empty"));
        }
        if self.pipelines.is_empty() {
            return Err(MetricError::BadConfig("pipeline list is empty"));
        }
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return Err(MetricError::BadConfig("sigma0 must be positive"));
        }
        if self.tau_list.iter().any(|t| *t == 0 || *t > s) {
            return Err(MetricError::BadConfig("tau outside 1..=S"));
        }
        if self.m_list.iter().any(|m| !(*m > 0.0) || *m > n as f64) {
            return Err(MetricError::BadConfig("observation count out of range"));
        }
        Ok(())
    }

    fn resolve_m(&self, m: f64, n: usize) -> usize {
        if m <= 1.0 {
            ((m * n as f64).round() as usize).clamp(1, n)
        } else {
            (m.round() as usize).min(n)
        }
    }
}

struct Cell {
    pipeline: PipelineKind,
    tau: usize,
    m_obs: usize,
    seed: u64,
}

/// Runs the full sweep grid over the test split and returns per-step rows
/// followed by one aggregate row per cell. A failing cell contributes a
/// NaN aggregate row and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    cfg: &SweepConfig,
    test_abs: &FieldSeries,
    stats: &NormStats,
    basis: &TruncatedBasis,
    bg: &crate::reduced::BackgroundMatrix,
    codec: Option<&dyn Codec>,
    opts: &SolveOptions,
) -> Result<Vec<MetricRecord>, MetricError> {
    let grid = test_abs.grid();
    let n = grid.n();
    let s = basis.sample_count();
    cfg.validate(n, s)?;
    if cfg.pipelines.contains(&PipelineKind::Bi) && codec.is_none() {
        return Err(MetricError::MissingCodec);
    }

    // Centered-normalized truth per step, plus absolute references.
    let mut truth_centered = Vec::with_capacity(test_abs.len());
    for step in test_abs.steps() {
        let normalized = apply_normalization(step, stats)?;
        let centered: Vec<f64> = normalized
            .values()
            .iter()
            .zip(basis.mean().iter())
            .map(|(v, m)| v - m)
            .collect();
        truth_centered.push(StateField::new(grid, centered)?);
    }
    let x_b_abs = invert_normalization(
        &StateField::new(grid, basis.mean().iter().copied().collect())?,
        stats,
    )?;

    // Cell grid in a fixed order; each cell owns a derived seed.
    let mut cells = Vec::new();
    for pipeline in &cfg.pipelines {
        match pipeline {
            PipelineKind::Mono => {
                for &tau in &cfg.tau_list {
                    for m in &cfg.m_list {
                        let m_obs = cfg.resolve_m(*m, n);
                        let seed = rng::mix(cfg.seed, cells.len() as u64);
                        cells.push(Cell { pipeline: *pipeline, tau, m_obs, seed });
                    }
                }
            }
            PipelineKind::Bi => {
                for m in &cfg.m_list {
                    let m_obs = cfg.resolve_m(*m, n);
                    let seed = rng::mix(cfg.seed, cells.len() as u64);
                    cells.push(Cell { pipeline: *pipeline, tau: 0, m_obs, seed });
                }
            }
        }
    }

    let run_cell = |cell: &Cell| -> Vec<MetricRecord> {
        match run_one_cell(cell, cfg, &truth_centered, test_abs, &x_b_abs, stats, basis, bg, codec, opts)
        {
            Ok(records) => records,
            Err(_) => vec![MetricRecord {
                pipeline: cell.pipeline,
                tau: cell.tau,
                m_obs: cell.m_obs,
                sigma0: cfg.sigma0,
                step: -1,
                da_mse: f64::NAN,
                ref_mse: f64::NAN,
                iterations: 0.0,
                minimize_s: 0.0,
                restore_s: 0.0,
                total_s: 0.0,
                converged: false,
            }],
        }
    };

    let per_cell: Vec<Vec<MetricRecord>> = if cfg.timing_mode {
        cells.iter().map(run_cell).collect()
    } else {
        cells.par_iter().map(run_cell).collect()
    };
    Ok(per_cell.into_iter().flatten().collect())
}

#[allow(clippy::too_many_arguments)]
fn run_one_cell(
    cell: &Cell,
    cfg: &SweepConfig,
    truth_centered: &[StateField],
    test_abs: &FieldSeries,
    x_b_abs: &StateField,
    stats: &NormStats,
    basis: &TruncatedBasis,
    bg: &crate::reduced::BackgroundMatrix,
    codec: Option<&dyn Codec>,
    opts: &SolveOptions,
) -> Result<Vec<MetricRecord>, MetricError> {
    let grid = test_abs.grid();
    let n = grid.n();

    // Offline preparation: the observation subset is redrawn per cell.
    enum Prepared<'c> {
        Mono { basis: TruncatedBasis, operator: ObservationOperator },
        Bi(BiContext<'c>),
    }
    let prepared = match cell.pipeline {
        PipelineKind::Mono => {
            let operator = if cell.m_obs == n {
                ObservationOperator::identity(n)
            } else {
                let mut rng = rng::substream(cell.seed, 0);
                let mut idx = rand::seq::index::sample(&mut rng, n, cell.m_obs).into_vec();
                idx.sort_unstable();
                ObservationOperator::subsample(n, idx)?
            };
            let cell_basis = basis.retruncate(cell.tau)?;
            Prepared::Mono { basis: cell_basis, operator }
        }
        PipelineKind::Bi => {
            // The latent path always assimilates the full state; the cell's
            // M is recorded for report alignment but does not change the
            // computation (its cost is observation-count independent).
            let codec = codec.ok_or(MetricError::MissingCodec)?;
            Prepared::Bi(BiContext::new(codec, bg, stats, grid, Some(cfg.sigma0))?)
        }
    };
    let mono_ctx = match &prepared {
        Prepared::Mono { basis: cell_basis, operator } => {
            Some(MonoContext::new(cell_basis, stats, grid, operator.clone())?)
        }
        Prepared::Bi(_) => None,
    };

    let operator = match &prepared {
        Prepared::Mono { operator, .. } => operator.clone(),
        Prepared::Bi(_) => ObservationOperator::identity(n),
    };

    let mut records = Vec::with_capacity(truth_centered.len() + 1);
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut all_converged = true;

    for (i, truth_c) in truth_centered.iter().enumerate() {
        let mut values = operator.apply(truth_c.values())?;
        if cfg.noise {
            use rand::distributions::Distribution;
            let mut noise_rng = rng::substream(cell.seed, 1 + i as u64);
            for v in &mut values {
                let z: f64 = rand_distr::StandardNormal.sample(&mut noise_rng);
                *v += cfg.sigma0 * z;
            }
        }
        let obs = ObservationSet::new(operator.clone(), values, cfg.sigma0)?;
        let (solution, timing) = time_online(cfg.repetitions, || match (&prepared, &mono_ctx) {
            (Prepared::Mono { .. }, Some(ctx)) => ctx.assimilate(&obs, opts),
            (Prepared::Bi(ctx), _) => ctx.assimilate(&obs, opts),
            _ => unreachable!(),
        })?;

        let truth_abs = test_abs.step(i);
        let da = da_mse(solution.x_da.values(), truth_abs.values())?;
        let rf = ref_mse(x_b_abs.values(), truth_abs.values())?;
        let record = MetricRecord {
            pipeline: cell.pipeline,
            tau: cell.tau,
            m_obs: cell.m_obs,
            sigma0: cfg.sigma0,
            step: test_abs.labels()[i],
            da_mse: da,
            ref_mse: rf,
            iterations: solution.iterations as f64,
            minimize_s: timing.minimize_s,
            restore_s: timing.restore_s,
            total_s: timing.total_s,
            converged: solution.converged,
        };
        sums.0 += da;
        sums.1 += rf;
        sums.2 += record.iterations;
        sums.3 += record.minimize_s;
        sums.4 += record.restore_s;
        sums.5 += record.total_s;
        all_converged &= record.converged;
        records.push(record);
    }

    let count = truth_centered.len() as f64;
    records.push(MetricRecord {
        pipeline: cell.pipeline,
        tau: cell.tau,
        m_obs: cell.m_obs,
        sigma0: cfg.sigma0,
        step: -1,
        da_mse: sums.0 / count,
        ref_mse: sums.1 / count,
        iterations: sums.2 / count,
        minimize_s: sums.3 / count,
        restore_s: sums.4 / count,
        total_s: sums.5 / count,
        converged: all_converged,
    });
    Ok(records)
}
