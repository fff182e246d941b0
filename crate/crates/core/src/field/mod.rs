//! Grids, state fields, ensembles and their statistics.
//!
//! A state field is a flattened 3D scalar field on a regular grid; the
//! flattening order is fixed (x fastest, then y, then z) and is part of the
//! on-disk format contract. Series are time-ordered and immutable after
//! construction, so they are safe to share across threads.

mod io;
mod synth;

pub use io::{load_series, save_series, FormatError};
pub use synth::{generate_synthetic, SynthConfig};

use rand::distributions::Distribution;
use rand_distr::Normal;
use thiserror::Error;

use crate::rng;

/// Smallest admissible standard deviation; locations with no variance are
/// clamped here so normalization never divides by zero.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid extents must all be positive")]
    ZeroGrid,
    #[error("grid spacing must be positive")]
    BadSpacing,
    #[error("value length {got} does not match grid size {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("series is empty")]
    EmptySeries,
    #[error("series steps must share one grid")]
    GridMismatch,
    #[error("timestep labels must be strictly increasing")]
    LabelOrder,
    #[error("split fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("per-location statistics need at least two steps")]
    DegenerateStats,
    #[error("stats length {got} does not match field size {want}")]
    StatsMismatch { got: usize, want: usize },
    #[error("jitter {name} = {value} is outside [0, 1]")]
    BadJitter { name: &'static str, value: f64 },
    #[error("spectral mode count {modes} exceeds grid size {n}")]
    TooManyModes { modes: usize, n: usize },
    #[error("synthetic parameter {name} = {value} is out of range")]
    BadSynthParam { name: &'static str, value: f64 },
}

/// A regular 3D grid. Extents are cell counts; spacing is metres and purely
/// informational.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: [f64; 3],
}

impl Grid3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, FieldError> {
        Self::with_spacing(nx, ny, nz, [1.0, 1.0, 1.0])
    }

    pub fn with_spacing(
        nx: usize,
        ny: usize,
        nz: usize,
        spacing: [f64; 3],
    ) -> Result<Self, FieldError> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(FieldError::ZeroGrid);
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(FieldError::BadSpacing);
        }
        Ok(Self { nx, ny, nz, spacing })
    }

    /// Total number of grid points.
    pub fn n(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Flat index of (i, j, k); x varies fastest, then y, then z.
    pub fn flatten(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    /// Inverse of [`Grid3::flatten`].
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.n());
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }
}

/// One scalar field on a grid; all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    grid: Grid3,
    values: Vec<f64>,
}

impl StateField {
    pub fn new(grid: Grid3, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.n() {
            return Err(FieldError::LengthMismatch { got: values.len(), want: grid.n() });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(bad));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self { grid, values: vec![0.0; grid.n()] }
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A time-ordered sequence of fields on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    grid: Grid3,
    labels: Vec<i64>,
    steps: Vec<StateField>,
}

impl FieldSeries {
    /// Builds a series with labels `0..steps.len()`.
    pub fn new(grid: Grid3, steps: Vec<StateField>) -> Result<Self, FieldError> {
        let labels = (0..steps.len() as i64).collect();
        Self::with_labels(grid, labels, steps)
    }

    pub fn with_labels(
        grid: Grid3,
        labels: Vec<i64>,
        steps: Vec<StateField>,
    ) -> Result<Self, FieldError> {
        if steps.is_empty() {
            return Err(FieldError::EmptySeries);
        }
        if labels.len() != steps.len() {
            return Err(FieldError::LabelOrder);
        }
        if !labels.windows(2).all(|w| w[0] < w[1]) {
            return Err(FieldError::LabelOrder);
        }
        if steps.iter().any(|s| s.grid != grid) {
            return Err(FieldError::GridMismatch);
        }
        Ok(Self { grid, labels, steps })
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn steps(&self) -> &[StateField] {
        &self.steps
    }

    pub fn step(&self, i: usize) -> &StateField {
        &self.steps[i]
    }
}

/// Normalization statistics computed from a training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// One mean/std pair over every value of every step.
    Scalar,
    /// A mean/std pair per grid location, over the steps.
    PerLocation,
}

/// Per-location or scalar mean/std; std entries are clamped to [`STD_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    mode: NormMode,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Std at a flat location, resolving the scalar/per-location layout.
    pub fn std_at(&self, idx: usize) -> f64 {
        match self.mode {
            NormMode::Scalar => self.std[0],
            NormMode::PerLocation => self.std[idx],
        }
    }

    fn mean_at(&self, idx: usize) -> f64 {
        match self.mode {
            NormMode::Scalar => self.mean[0],
            NormMode::PerLocation => self.mean[idx],
        }
    }

    fn check(&self, n: usize) -> Result<(), FieldError> {
        let want = match self.mode {
            NormMode::Scalar => 1,
            NormMode::PerLocation => n,
        };
        if self.mean.len() != want || self.std.len() != want {
            return Err(FieldError::StatsMismatch { got: self.mean.len(), want });
        }
        Ok(())
    }

    /// Identity statistics (mean 0, std 1) for data that is already
    /// normalized; used when jittering normalized training inputs.
    pub fn unit(mode: NormMode, n: usize) -> Self {
        let len = match mode {
            NormMode::Scalar => 1,
            NormMode::PerLocation => n,
        };
        Self { mode, mean: vec![0.0; len], std: vec![1.0; len] }
    }
}

/// Field-jitter augmentation parameters: Gaussian noise of amplitude
/// `amplitude * sigma` injected at a `frequency` fraction of locations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    pub amplitude: f64,
    pub frequency: f64,
    pub seed: u64,
}

impl JitterConfig {
    pub fn new(amplitude: f64, frequency: f64, seed: u64) -> Result<Self, FieldError> {
        if !(0.0..=1.0).contains(&amplitude) || !amplitude.is_finite() {
            return Err(FieldError::BadJitter { name: "amplitude", value: amplitude });
        }
        if !(0.0..=1.0).contains(&frequency) || !frequency.is_finite() {
            return Err(FieldError::BadJitter { name: "frequency", value: frequency });
        }
        Ok(Self { amplitude, frequency, seed })
    }
}

/// Splits a time-ordered series into `(train, test)` without shuffling; the
/// train side takes the first `ceil(fraction * T)` steps.
pub fn split_series(
    series: &FieldSeries,
    fraction: f64,
) -> Result<(FieldSeries, FieldSeries), FieldError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(FieldError::BadFraction(fraction));
    }
    let t = series.len();
    let train_len = ((fraction * t as f64).ceil() as usize).min(t);
    if train_len == 0 || train_len == t {
        return Err(FieldError::BadFraction(fraction));
    }
    let train = FieldSeries::with_labels(
        series.grid,
        series.labels[..train_len].to_vec(),
        series.steps[..train_len].to_vec(),
    )?;
    let test = FieldSeries::with_labels(
        series.grid,
        series.labels[train_len..].to_vec(),
        series.steps[train_len..].to_vec(),
    )?;
    Ok((train, test))
}

/// Computes normalization statistics from a training split.
///
/// Means and stds are population statistics in a fixed summation order;
/// per-location mode needs at least two steps.
pub fn compute_norm_stats(train: &FieldSeries, mode: NormMode) -> Result<NormStats, FieldError> {
    if train.is_empty() {
        return Err(FieldError::EmptySeries);
    }
    let n = train.grid.n();
    let t = train.len();
    match mode {
        NormMode::Scalar => {
            let count = (n * t) as f64;
            let mut sum = 0.0;
            for s in &train.steps {
                for v in &s.values {
                    sum += v;
                }
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for s in &train.steps {
                for v in &s.values {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let std = (sq / count).sqrt().max(STD_FLOOR);
            Ok(NormStats { mode, mean: vec![mean], std: vec![std] })
        }
        NormMode::PerLocation => {
            if t < 2 {
                return Err(FieldError::DegenerateStats);
            }
            let mut mean = vec![0.0; n];
            for s in &train.steps {
                for (m, v) in mean.iter_mut().zip(&s.values) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= t as f64;
            }
            let mut var = vec![0.0; n];
            for s in &train.steps {
                for ((sq, v), m) in var.iter_mut().zip(&s.values).zip(&mean) {
                    let d = v - m;
                    *sq += d * d;
                }
            }
            let std = var.iter().map(|sq| (sq / t as f64).sqrt().max(STD_FLOOR)).collect();
            Ok(NormStats { mode, mean, std })
        }
    }
}

/// Maps a field to normalized coordinates: `(x - mean) / std`.
pub fn apply_normalization(field: &StateField, stats: &NormStats) -> Result<StateField, FieldError> {
    stats.check(field.grid.n())?;
    let values = field
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - stats.mean_at(i)) / stats.std_at(i))
        .collect();
    StateField::new(field.grid, values)
}

/// Inverse of [`apply_normalization`]: `x * std + mean`.
pub fn invert_normalization(
    field: &StateField,
    stats: &NormStats,
) -> Result<StateField, FieldError> {
    stats.check(field.grid.n())?;
    let values = field
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| v * stats.std_at(i) + stats.mean_at(i))
        .collect();
    StateField::new(field.grid, values)
}

/// Subtracts `mean` from every step. With the sample mean of the series the
/// resulting ensemble columns sum to the zero vector.
pub fn mean_center(series: &FieldSeries, mean: &[f64]) -> Result<FieldSeries, FieldError> {
    let n = series.grid.n();
    if mean.len() != n {
        return Err(FieldError::StatsMismatch { got: mean.len(), want: n });
    }
    let steps = series
        .steps
        .iter()
        .map(|s| {
            let values = s.values.iter().zip(mean).map(|(v, m)| v - m).collect();
            StateField::new(s.grid, values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    FieldSeries::with_labels(series.grid, series.labels.clone(), steps)
}

/// Column mean of a series, in a fixed summation order.
pub fn sample_mean(series: &FieldSeries) -> Vec<f64> {
    let n = series.grid.n();
    let mut mean = vec![0.0; n];
    for s in &series.steps {
        for (m, v) in mean.iter_mut().zip(&s.values) {
            *m += v;
        }
    }
    let t = series.len() as f64;
    for m in &mut mean {
        *m /= t;
    }
    mean
}

/// Perturbs a `frequency` fraction of locations (drawn without replacement,
/// seeded) with Gaussian noise of standard deviation `amplitude * sigma` at
/// each chosen location; everything else is untouched.
pub fn field_jitter(
    field: &StateField,
    cfg: &JitterConfig,
    stats: &NormStats,
) -> Result<StateField, FieldError> {
    stats.check(field.grid.n())?;
    let n = field.grid.n();
    let count = (cfg.frequency * n as f64).round() as usize;
    if count == 0 || cfg.amplitude == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = rng::stream(cfg.seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec();
    chosen.sort_unstable();
    let mut values = field.values.clone();
    for idx in chosen {
        let sd = cfg.amplitude * stats.std_at(idx);
        // Normal::new only fails on non-finite sd; sd > 0 here.
        let noise = Normal::new(0.0, sd).expect("finite std").sample(&mut rng);
        values[idx] += noise;
    }
    StateField::new(field.grid, values)
}
