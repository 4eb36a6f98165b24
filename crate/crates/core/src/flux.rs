//! Time-dependent injection fluxes and the film-thickness law they induce.
//!
//! A schedule assigns every species `0..=n` a nonnegative rate `φ_i(t)`. The
//! solver consumes per-step samples
//!
//! ```text
//! φ̂_i^m = (1/Δt) ∫_{t_{m-1}}^{t_m} φ_i(s) ds,
//! ```
//!
//! the exact interval averages, so constant and piecewise-constant schedules
//! are discretized without error and the rectangle rule for the thickness
//!
//! ```text
//! e_m = e_0 + Σ_{p≤m} Σ_i φ̂_i^p Δt,      e_m^d = Σ_i φ̂_i^m,
//! ```
//!
//! reproduces `e(t) = e_0 + ∫ Σ φ_i` exactly at grid times for them.

use thiserror::Error;

/// Errors raised by schedule construction and sampling.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluxError {
    /// A rate was negative.
    #[error("flux value {value} for species {species} must be nonnegative")]
    NegativeValue { species: usize, value: f64 },
    /// Piecewise breakpoints must satisfy `0 < τ_1 < τ_2 < T`.
    #[error("breakpoints (τ1, τ2) = ({tau1}, {tau2}) must satisfy 0 < τ1 < τ2 < {horizon}")]
    InvalidBreakpoints { tau1: f64, tau2: f64, horizon: f64 },
    /// A per-step table was built or used with mismatched dimensions.
    #[error("per-step table has {got} steps but {expected} were requested")]
    StepCountMismatch { expected: usize, got: usize },
    /// A schedule must cover at least two species (one plus the eliminated).
    #[error("a schedule needs at least 2 species, got {got}")]
    TooFewSpecies { got: usize },
    /// Sampling parameters must be positive.
    #[error("sampling needs M ≥ 1 and T > 0, got M = {steps}, T = {horizon}")]
    BadSampling { steps: usize, horizon: f64 },
    /// A declared bound `F` was exceeded.
    #[error("flux value {value} for species {species} exceeds the bound {bound}")]
    BoundExceeded { species: usize, value: f64, bound: f64 },
}

/// Piecewise-constant rate for one species: level `levels[0]` on `(0, τ1]`,
/// `levels[1]` on `(τ1, τ2]`, `levels[2]` on `(τ2, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSpecies {
    pub tau1: f64,
    pub tau2: f64,
    pub levels: [f64; 3],
}

/// Per-species injection schedule over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum FluxSchedule {
    /// `φ_i(t) = β_i`.
    Constant(Vec<f64>),
    /// Three-phase piecewise-constant rates, one description per species.
    Piecewise(Vec<PiecewiseSpecies>),
    /// Explicit per-step samples, already interval averages.
    PerStep(FluxSamples),
}

impl FluxSchedule {
    /// Constant schedule from levels `β_0..β_n`.
    pub fn constant(beta: Vec<f64>) -> Result<Self, FluxError> {
        check_species_count(beta.len())?;
        check_nonnegative(beta.iter().copied().enumerate())?;
        Ok(Self::Constant(beta))
    }

    /// Piecewise-constant schedule; breakpoint validity is checked against
    /// the horizon at sampling time.
    pub fn piecewise(species: Vec<PiecewiseSpecies>) -> Result<Self, FluxError> {
        check_species_count(species.len())?;
        for (i, s) in species.iter().enumerate() {
            check_nonnegative(s.levels.iter().map(|&l| (i, l)))?;
        }
        Ok(Self::Piecewise(species))
    }

    /// Schedule given directly by its per-step samples.
    pub fn per_step(samples: FluxSamples) -> Self {
        Self::PerStep(samples)
    }

    /// Number of species `n + 1` covered by the schedule.
    pub fn species(&self) -> usize {
        match self {
            Self::Constant(beta) => beta.len(),
            Self::Piecewise(species) => species.len(),
            Self::PerStep(samples) => samples.species(),
        }
    }

    /// The constant levels `β_i`, when the schedule is constant.
    pub fn constant_levels(&self) -> Option<&[f64]> {
        match self {
            Self::Constant(beta) => Some(beta),
            _ => None,
        }
    }

    /// Checks every rate against a declared bound `F`.
    pub fn check_bound(&self, bound: f64) -> Result<(), FluxError> {
        let check = |species: usize, value: f64| {
            if value > bound {
                Err(FluxError::BoundExceeded {
                    species,
                    value,
                    bound,
                })
            } else {
                Ok(())
            }
        };
        match self {
            Self::Constant(beta) => beta
                .iter()
                .enumerate()
                .try_for_each(|(i, &b)| check(i, b)),
            Self::Piecewise(species) => species
                .iter()
                .enumerate()
                .try_for_each(|(i, s)| s.levels.iter().try_for_each(|&l| check(i, l))),
            Self::PerStep(samples) => (0..samples.species()).try_for_each(|i| {
                (0..samples.steps()).try_for_each(|m| check(i, samples.get(i, m)))
            }),
        }
    }

    /// Exact per-step interval averages `φ̂_i^m` on `M` steps of `T / M`.
    ///
    /// For a per-step schedule the stored table is returned unchanged and its
    /// step count must equal `M`.
    pub fn sample(&self, steps: usize, horizon: f64) -> Result<FluxSamples, FluxError> {
        if steps == 0 || horizon <= 0.0 {
            return Err(FluxError::BadSampling { steps, horizon });
        }
        let dt = horizon / steps as f64;
        match self {
            Self::Constant(beta) => {
                let mut samples = FluxSamples::zeros(beta.len(), steps);
                for (i, &b) in beta.iter().enumerate() {
                    for m in 0..steps {
                        samples.set(i, m, b);
                    }
                }
                Ok(samples)
            }
            Self::Piecewise(species) => {
                for s in species {
                    if !(0.0 < s.tau1 && s.tau1 < s.tau2 && s.tau2 < horizon) {
                        return Err(FluxError::InvalidBreakpoints {
                            tau1: s.tau1,
                            tau2: s.tau2,
                            horizon,
                        });
                    }
                }
                let mut samples = FluxSamples::zeros(species.len(), steps);
                for (i, s) in species.iter().enumerate() {
                    for m in 0..steps {
                        let t0 = m as f64 * dt;
                        let t1 = t0 + dt;
                        // Length-weighted average of the phases overlapping [t0, t1].
                        let l1 = (s.tau1.min(t1) - t0).max(0.0);
                        let l3 = (t1 - s.tau2.max(t0)).max(0.0);
                        let l2 = (t1 - t0 - l1 - l3).max(0.0);
                        let avg = (l1 * s.levels[0] + l2 * s.levels[1] + l3 * s.levels[2]) / dt;
                        samples.set(i, m, avg);
                    }
                }
                Ok(samples)
            }
            Self::PerStep(samples) => {
                if samples.steps() != steps {
                    return Err(FluxError::StepCountMismatch {
                        expected: steps,
                        got: samples.steps(),
                    });
                }
                Ok(samples.clone())
            }
        }
    }
}

fn check_species_count(count: usize) -> Result<(), FluxError> {
    if count < 2 {
        return Err(FluxError::TooFewSpecies { got: count });
    }
    Ok(())
}

fn check_nonnegative(values: impl Iterator<Item = (usize, f64)>) -> Result<(), FluxError> {
    for (species, value) in values {
        if value < 0.0 {
            return Err(FluxError::NegativeValue { species, value });
        }
    }
    Ok(())
}

/// Matrix of per-step flux samples `φ̂[i][m]`, `i = 0..=n`, `m = 1..=M`
/// (stored zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSamples {
    species: usize,
    steps: usize,
    data: Vec<f64>,
}

impl FluxSamples {
    pub fn zeros(species: usize, steps: usize) -> Self {
        Self {
            species,
            steps,
            data: vec![0.0; species * steps],
        }
    }

    /// Builds a table from per-species rows, validating nonnegativity and a
    /// uniform step count.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FluxError> {
        check_species_count(rows.len())?;
        let steps = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != steps {
                return Err(FluxError::StepCountMismatch {
                    expected: steps,
                    got: row.len(),
                });
            }
            check_nonnegative(row.iter().map(|&v| (i, v)))?;
        }
        let mut samples = Self::zeros(rows.len(), steps);
        for (i, row) in rows.iter().enumerate() {
            for (m, &v) in row.iter().enumerate() {
                samples.set(i, m, v);
            }
        }
        Ok(samples)
    }

    pub fn species(&self) -> usize {
        self.species
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Sample for species `i` on step `m` (zero-based step index).
    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.data[i * self.steps + m]
    }

    pub fn set(&mut self, i: usize, m: usize, value: f64) {
        self.data[i * self.steps + m] = value;
    }

    /// Column `m` as a vector over species.
    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.species).map(|i| self.get(i, m)).collect()
    }

    /// Total injection rate `Σ_i φ̂_i^m` on step `m`.
    pub fn column_total(&self, m: usize) -> f64 {
        (0..self.species).map(|i| self.get(i, m)).sum()
    }
}

/// Discrete thickness history induced by flux samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessTrack {
    /// Initial thickness `e_0 > 0`.
    pub e0: f64,
    /// `e_m` for `m = 0..=M`; nondecreasing, starts at `e0`.
    pub e: Vec<f64>,
    /// Growth rates `e_m^d = Σ_i φ̂_i^m` for `m = 1..=M` (zero-based).
    pub ed: Vec<f64>,
}

/// Accumulates the thickness law over the samples.
pub fn thickness_track(
    samples: &FluxSamples,
    e0: f64,
    dt: f64,
) -> Result<ThicknessTrack, FluxError> {
    for i in 0..samples.species() {
        for m in 0..samples.steps() {
            let value = samples.get(i, m);
            if value < 0.0 {
                return Err(FluxError::NegativeValue { species: i, value });
            }
        }
    }
    let mut e = Vec::with_capacity(samples.steps() + 1);
    let mut ed = Vec::with_capacity(samples.steps());
    e.push(e0);
    let mut current = e0;
    for m in 0..samples.steps() {
        let rate = samples.column_total(m);
        current += rate * dt;
        ed.push(rate);
        e.push(current);
    }
    Ok(ThicknessTrack { e0, e, ed })
}
