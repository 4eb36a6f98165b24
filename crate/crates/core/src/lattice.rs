//! Microscopic counterpart of the macroscopic solver: multi-species exchange
//! dynamics on a one-dimensional site lattice.
//!
//! Sites are grouped into intervals of fixed capacity `C`; the state records
//! how many atoms of each species occupy each interval. One Monte-Carlo sweep
//! visits every bond between neighbouring intervals and proposes `2·C` atom
//! exchanges across it: a proposal picks one atom uniformly from each side and
//! swaps them with the species-pair probability `p_ij`. Ends are reflecting
//! (no exchange past the boundary), so per-species particle counts are
//! conserved exactly.
//!
//! Under the diffusive scaling `a = 2·Δx²/Δt` — interval width `Δx`, one
//! sweep per time step `Δt` — the expected occupancy update per sweep is
//!
//! ```text
//! E[Δv_i(k)] = (a·Δt/Δx²) · Σ_j p_ij · [ v_j(k)·D²v_i(k) − v_i(k)·D²v_j(k) ]
//! ```
//!
//! with `D²` the three-point second difference, which is the implicit-scheme
//! right-hand side on a static unit domain with coefficients `K_ij = a·p_ij`
//! and no injection. [`hydrodynamic_compare`] runs an ensemble of lattices
//! alongside the macroscopic solver and reports the per-species L¹ distance
//! between the ensemble-averaged coarse density and the solved field.

use crate::flux::{FluxError, FluxSchedule};
use crate::model::{KMatrix, ModelError};
use crate::solver::{
    discretize_initial, CrossDiffusionStencil, Field, Grid, NewtonConfig, Simulation, SolverError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Exchange proposals per bond in one sweep, as a multiple of the interval
/// capacity. Two proposals per site realize the `K = a·p` correspondence
/// under the `a = 2·Δx²/Δt` scaling (the factor 2 in the scaling is matched
/// by the factor 2 in the proposal budget).
const PROPOSALS_PER_SITE: usize = 2;

/// Relative slack when converting a time horizon into a whole number of
/// sweeps.
const SWEEP_COUNT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("exchange table needs at least one species")]
    NoSpecies,
    #[error("exchange table row {row} has {got} entries, expected {expected}")]
    MalformedTable {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("exchange probability ({i},{j}) = {value} outside [0, 1]")]
    ProbabilityRange { i: usize, j: usize, value: f64 },
    #[error("self-exchange probability ({i},{i}) must be zero")]
    NonzeroDiagonal { i: usize },
    #[error("exchange probabilities ({i},{j}) and ({j},{i}) differ")]
    AsymmetricProbabilities { i: usize, j: usize },
    #[error("interval capacity must be positive")]
    ZeroCapacity,
    #[error("{sites} sites do not divide into intervals of capacity {capacity}")]
    SitesNotDivisible { sites: usize, capacity: usize },
    #[error("lattice needs at least two intervals, got {got}")]
    TooFewIntervals { got: usize },
    #[error("counts vector of length {len} is not a multiple of {species} species")]
    CountsShape { len: usize, species: usize },
    #[error("interval {interval} holds {sum} atoms, capacity is {capacity}")]
    IntervalSum {
        interval: usize,
        sum: u64,
        capacity: usize,
    },
    #[error("state has {state} species, exchange table has {table}")]
    SpeciesMismatch { state: usize, table: usize },
    #[error("{bins} bins do not divide {intervals} intervals")]
    BinsNotDivisible { bins: usize, intervals: usize },
    #[error("initial profile for species {species} is negative or non-finite at y = {y}")]
    NegativeProfile { species: usize, y: f64 },
    #[error("initial profiles vanish at y = {y}")]
    DegenerateProfile { y: f64 },
    #[error("scaling parameter {name} = {value} must be positive and finite")]
    BadScaling { name: &'static str, value: f64 },
    #[error("horizon {horizon} is not a whole number of sweeps of length {sweep_dt}")]
    HorizonMismatch { horizon: f64, sweep_dt: f64 },
    #[error("comparison needs at least one ensemble member")]
    EmptyEnsemble,
    #[error("{cells} macroscopic cells do not divide into {bins} bins")]
    CellsNotDivisible { cells: usize, bins: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Symmetric species-pair swap probabilities `p_ij ∈ [0, 1]` with zero
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeProbabilities {
    species: usize,
    entries: Vec<f64>,
}

impl ExchangeProbabilities {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LatticeError> {
        let species = rows.len();
        if species == 0 {
            return Err(LatticeError::NoSpecies);
        }
        for (row, r) in rows.iter().enumerate() {
            if r.len() != species {
                return Err(LatticeError::MalformedTable {
                    row,
                    got: r.len(),
                    expected: species,
                });
            }
        }
        for i in 0..species {
            if rows[i][i] != 0.0 {
                return Err(LatticeError::NonzeroDiagonal { i });
            }
            for j in 0..species {
                let value = rows[i][j];
                if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                    return Err(LatticeError::ProbabilityRange { i, j, value });
                }
                if j > i && (rows[i][j] - rows[j][i]).abs() > 1e-12 {
                    return Err(LatticeError::AsymmetricProbabilities { i, j });
                }
            }
        }
        let entries = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self { species, entries })
    }

    /// Table with every off-diagonal probability equal to `value`.
    pub fn uniform(species: usize, value: f64) -> Result<Self, LatticeError> {
        let rows: Vec<Vec<f64>> = (0..species)
            .map(|i| {
                (0..species)
                    .map(|j| if i == j { 0.0 } else { value })
                    .collect()
            })
            .collect();
        Self::from_rows(&rows)
    }

    pub fn species(&self) -> usize {
        self.species
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.species + j]
    }
}

/// Diffusive space-time scaling of the lattice: interval width `Δx` and the
/// physical duration `Δt` of one sweep, tied to the macroscopic diffusion
/// scale through `a = 2·Δx²/Δt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingParams {
    spacing: f64,
    sweep_dt: f64,
}

impl ScalingParams {
    pub fn new(spacing: f64, sweep_dt: f64) -> Result<Self, LatticeError> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(LatticeError::BadScaling {
                name: "spacing",
                value: spacing,
            });
        }
        if !(sweep_dt.is_finite() && sweep_dt > 0.0) {
            return Err(LatticeError::BadScaling {
                name: "sweep_dt",
                value: sweep_dt,
            });
        }
        Ok(Self { spacing, sweep_dt })
    }

    /// Scaling for a unit domain split into `intervals`, with the sweep
    /// duration chosen so the diffusion constant comes out to `diffusion`.
    pub fn for_intervals(intervals: usize, diffusion: f64) -> Result<Self, LatticeError> {
        if intervals < 2 {
            return Err(LatticeError::TooFewIntervals { got: intervals });
        }
        if !(diffusion.is_finite() && diffusion > 0.0) {
            return Err(LatticeError::BadScaling {
                name: "diffusion",
                value: diffusion,
            });
        }
        let spacing = 1.0 / intervals as f64;
        Self::new(spacing, 2.0 * spacing * spacing / diffusion)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn sweep_dt(&self) -> f64 {
        self.sweep_dt
    }

    /// `a = 2·Δx²/Δt`.
    pub fn diffusion_constant(&self) -> f64 {
        2.0 * self.spacing * self.spacing / self.sweep_dt
    }

    /// Macroscopic coefficient table induced by the exchange probabilities,
    /// `K_ij = a·p_ij`. Off-diagonal probabilities must be positive for the
    /// table to be admissible.
    pub fn coefficient_table(&self, p: &ExchangeProbabilities) -> Result<KMatrix, LatticeError> {
        let a = self.diffusion_constant();
        let rows: Vec<Vec<f64>> = (0..p.species())
            .map(|i| (0..p.species()).map(|j| a * p.get(i, j)).collect())
            .collect();
        Ok(KMatrix::from_rows(&rows)?)
    }

    /// Number of whole sweeps spanning `horizon`; errors unless the horizon
    /// is an integer multiple of the sweep duration.
    pub fn sweeps_for(&self, horizon: f64) -> Result<usize, LatticeError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LatticeError::BadScaling {
                name: "horizon",
                value: horizon,
            });
        }
        let ratio = horizon / self.sweep_dt;
        let sweeps = ratio.round();
        if (ratio - sweeps).abs() > SWEEP_COUNT_TOL * ratio.max(1.0) || sweeps < 1.0 {
            return Err(LatticeError::HorizonMismatch {
                horizon,
                sweep_dt: self.sweep_dt,
            });
        }
        Ok(sweeps as usize)
    }
}

/// Occupancy state of the site lattice: per-interval, per-species atom
/// counts (each interval holds exactly `capacity` atoms) plus the stream of
/// randomness driving the exchanges.
#[derive(Debug, Clone)]
pub struct LatticeState {
    species: usize,
    capacity: usize,
    /// Interval-major: `counts[k·species + i]` atoms of species `i` in
    /// interval `k`.
    counts: Vec<u32>,
    rng: ChaCha8Rng,
}

impl LatticeState {
    /// Builds the lattice from target composition profiles, one per species,
    /// evaluated at interval midpoints and rounded to whole atoms by largest
    /// remainder.
    pub fn from_profile(
        profiles: &[&dyn Fn(f64) -> f64],
        sites: usize,
        capacity: usize,
        seed: u64,
    ) -> Result<Self, LatticeError> {
        let species = profiles.len();
        if species == 0 {
            return Err(LatticeError::NoSpecies);
        }
        let intervals = checked_intervals(sites, capacity)?;
        let mut counts = Vec::with_capacity(intervals * species);
        for k in 0..intervals {
            let y = (k as f64 + 0.5) / intervals as f64;
            let mut weights = Vec::with_capacity(species);
            for (i, profile) in profiles.iter().enumerate() {
                let w = profile(y);
                if !w.is_finite() || w < 0.0 {
                    return Err(LatticeError::NegativeProfile { species: i, y });
                }
                weights.push(w);
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return Err(LatticeError::DegenerateProfile { y });
            }
            for w in &mut weights {
                *w /= total;
            }
            counts.extend(largest_remainder(&weights, capacity));
        }
        Ok(Self {
            species,
            capacity,
            counts,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Builds the lattice directly from interval-major counts
    /// (`counts[k·species + i]`); every interval must sum to `capacity`.
    pub fn from_counts(
        species: usize,
        capacity: usize,
        counts: Vec<u32>,
        seed: u64,
    ) -> Result<Self, LatticeError> {
        if species == 0 {
            return Err(LatticeError::NoSpecies);
        }
        if capacity == 0 {
            return Err(LatticeError::ZeroCapacity);
        }
        if counts.len() % species != 0 {
            return Err(LatticeError::CountsShape {
                len: counts.len(),
                species,
            });
        }
        let intervals = counts.len() / species;
        if intervals < 2 {
            return Err(LatticeError::TooFewIntervals { got: intervals });
        }
        for k in 0..intervals {
            let sum: u64 = counts[k * species..(k + 1) * species]
                .iter()
                .map(|&c| u64::from(c))
                .sum();
            if sum != capacity as u64 {
                return Err(LatticeError::IntervalSum {
                    interval: k,
                    sum,
                    capacity,
                });
            }
        }
        Ok(Self {
            species,
            capacity,
            counts,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn species(&self) -> usize {
        self.species
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn intervals(&self) -> usize {
        self.counts.len() / self.species
    }

    pub fn sites(&self) -> usize {
        self.intervals() * self.capacity
    }

    /// Atoms of species `i` in interval `k`.
    pub fn count(&self, i: usize, k: usize) -> u32 {
        self.counts[k * self.species + i]
    }

    /// Total atoms of species `i` across the lattice.
    pub fn species_total(&self, i: usize) -> u64 {
        (0..self.intervals())
            .map(|k| u64::from(self.count(i, k)))
            .sum()
    }

    fn raw_counts(&self) -> &[u32] {
        &self.counts
    }

    /// Uniformly random atom species within interval `k`.
    fn sample_species(&mut self, k: usize) -> usize {
        let mut pick = self.rng.gen_range(0..self.capacity as u32);
        let base = k * self.species;
        for i in 0..self.species {
            let c = self.counts[base + i];
            if pick < c {
                return i;
            }
            pick -= c;
        }
        unreachable!("interval occupancy sums to the capacity");
    }
}

/// One synchronous sweep of attempted neighbour exchanges: every bond between
/// adjacent intervals receives `2·capacity` proposals; each proposal draws one
/// atom from each side and swaps them with probability `p_ij` of the drawn
/// species pair. Boundaries are reflecting, so no atom leaves the lattice.
pub fn mc_step(state: &mut LatticeState, p: &ExchangeProbabilities) -> Result<(), LatticeError> {
    if state.species != p.species() {
        return Err(LatticeError::SpeciesMismatch {
            state: state.species,
            table: p.species(),
        });
    }
    sweep_once(state, p);
    Ok(())
}

fn sweep_once(state: &mut LatticeState, p: &ExchangeProbabilities) {
    let proposals = PROPOSALS_PER_SITE * state.capacity;
    let species = state.species;
    for bond in 0..state.intervals() - 1 {
        for _ in 0..proposals {
            let left = state.sample_species(bond);
            let right = state.sample_species(bond + 1);
            if left == right {
                continue;
            }
            let accept = p.get(left, right);
            if accept > 0.0 && state.rng.gen::<f64>() < accept {
                let lo = bond * species;
                let hi = (bond + 1) * species;
                state.counts[lo + left] -= 1;
                state.counts[lo + right] += 1;
                state.counts[hi + right] -= 1;
                state.counts[hi + left] += 1;
            }
        }
    }
}

/// Per-species volume fractions averaged over groups of intervals. `bins`
/// must divide the interval count.
pub fn coarse_grain(state: &LatticeState, bins: usize) -> Result<Field, LatticeError> {
    let intervals = state.intervals();
    if bins == 0 || intervals % bins != 0 {
        return Err(LatticeError::BinsNotDivisible { bins, intervals });
    }
    let group = intervals / bins;
    let atoms_per_bin = (group * state.capacity) as f64;
    let mut field = Field::zeros(state.species, bins);
    for b in 0..bins {
        for i in 0..state.species {
            let atoms: u64 = (b * group..(b + 1) * group)
                .map(|k| u64::from(state.count(i, k)))
                .sum();
            field.set(i, b, atoms as f64 / atoms_per_bin);
        }
    }
    Ok(field)
}

/// Largest-remainder rounding of `capacity · fractions` to whole atoms; ties
/// break towards lower species index, so the result is deterministic.
fn largest_remainder(fractions: &[f64], capacity: usize) -> Vec<u32> {
    let mut counts: Vec<u32> = Vec::with_capacity(fractions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(fractions.len());
    let mut assigned: u64 = 0;
    for (i, &f) in fractions.iter().enumerate() {
        let quota = f * capacity as f64;
        let floor = quota.floor().min(capacity as f64) as u32;
        counts.push(floor);
        assigned += u64::from(floor);
        remainders.push((i, quota - f64::from(floor)));
    }
    let mut leftover = (capacity as u64).saturating_sub(assigned) as usize;
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in &remainders {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    debug_assert_eq!(
        counts.iter().map(|&c| u64::from(c)).sum::<u64>(),
        capacity as u64
    );
    counts
}

fn checked_intervals(sites: usize, capacity: usize) -> Result<usize, LatticeError> {
    if capacity == 0 {
        return Err(LatticeError::ZeroCapacity);
    }
    if sites == 0 || sites % capacity != 0 {
        return Err(LatticeError::SitesNotDivisible { sites, capacity });
    }
    let intervals = sites / capacity;
    if intervals < 2 {
        return Err(LatticeError::TooFewIntervals { got: intervals });
    }
    Ok(intervals)
}

/// Configuration of a lattice-versus-solver comparison run.
pub struct CompareConfig<'a> {
    pub probabilities: &'a ExchangeProbabilities,
    /// Macroscopic diffusion scale `a`; the sweep duration follows from
    /// `a = 2·Δx²/Δt` and the coefficients are `K = a·p`.
    pub diffusion_constant: f64,
    pub sites: usize,
    /// Atoms per interval (sets both the interval count and the occupancy
    /// resolution).
    pub capacity: usize,
    /// Independent lattice realizations averaged on the microscopic side.
    pub ensemble: usize,
    pub horizon: f64,
    /// Initial composition profiles shared by both descriptions.
    pub initial: &'a [&'a dyn Fn(f64) -> f64],
    /// Macroscopic grid resolution; must be a multiple of the interval count.
    pub pde_cells: usize,
    pub pde_steps: usize,
    pub newton: NewtonConfig,
    pub stencil: CrossDiffusionStencil,
    pub seed: u64,
}

/// Outcome of [`hydrodynamic_compare`]: the two coarse densities on the same
/// bins and their per-species L¹ distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub bins: usize,
    pub sweeps: usize,
    /// Ensemble-averaged coarse lattice density at the final time.
    pub lattice_density: Field,
    /// Macroscopic field at the final time, averaged onto the same bins.
    pub pde_density: Field,
    /// Mean absolute per-bin gap, one entry per species.
    pub distances: Vec<f64>,
}

impl CompareReport {
    pub fn max_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs an ensemble of exchange lattices to the horizon, averages their
/// coarse densities, solves the zero-injection macroscopic system with the
/// matched coefficients `K = a·p` on a static unit domain, and reports the
/// per-species L¹ distances between the two descriptions.
///
/// Ensemble members evolve concurrently from per-member seeds derived from
/// `seed`; their counts are reduced as exact integer sums, so the report is
/// reproducible regardless of thread scheduling.
pub fn hydrodynamic_compare(cfg: &CompareConfig) -> Result<CompareReport, LatticeError> {
    let species = cfg.probabilities.species();
    if cfg.initial.len() != species {
        return Err(LatticeError::SpeciesMismatch {
            state: cfg.initial.len(),
            table: species,
        });
    }
    if cfg.ensemble == 0 {
        return Err(LatticeError::EmptyEnsemble);
    }
    let intervals = checked_intervals(cfg.sites, cfg.capacity)?;
    let scaling = ScalingParams::for_intervals(intervals, cfg.diffusion_constant)?;
    let sweeps = scaling.sweeps_for(cfg.horizon)?;
    if cfg.pde_cells % intervals != 0 {
        return Err(LatticeError::CellsNotDivisible {
            cells: cfg.pde_cells,
            bins: intervals,
        });
    }

    // All members share the deterministic initial occupancy; only the
    // exchange randomness differs.
    let template = LatticeState::from_profile(cfg.initial, cfg.sites, cfg.capacity, cfg.seed)?;
    let initial_counts = template.raw_counts().to_vec();
    // Pull plain data out of the config so the parallel region does not
    // capture the (non-thread-safe) profile closures.
    let probabilities = cfg.probabilities;
    let capacity = cfg.capacity;
    let base_seed = cfg.seed;
    let summed: Vec<u64> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|member| {
            let seed =
                base_seed.wrapping_add((member as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut state = LatticeState {
                species,
                capacity,
                counts: initial_counts.clone(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            for _ in 0..sweeps {
                sweep_once(&mut state, probabilities);
            }
            state
                .raw_counts()
                .iter()
                .map(|&c| u64::from(c))
                .collect::<Vec<u64>>()
        })
        .reduce(
            || vec![0u64; initial_counts.len()],
            |mut acc, member| {
                for (a, m) in acc.iter_mut().zip(member) {
                    *a += m;
                }
                acc
            },
        );

    let atoms_per_interval = (cfg.ensemble * cfg.capacity) as f64;
    let mut lattice_density = Field::zeros(species, intervals);
    for k in 0..intervals {
        for i in 0..species {
            lattice_density.set(i, k, summed[k * species + i] as f64 / atoms_per_interval);
        }
    }

    let grid = Grid::new(cfg.pde_cells)?;
    let initial = discretize_initial(cfg.initial, grid)?;
    // With every swap probability zero both descriptions are frozen: the
    // macroscopic coefficients K = a·p vanish, so the final field is the
    // initial one and no solve is needed (the coefficient table would reject
    // zero entries).
    let frozen = (0..species)
        .all(|i| (0..species).all(|j| i == j || cfg.probabilities.get(i, j) == 0.0));
    let trajectory;
    let fine = if frozen {
        &initial
    } else {
        let table = scaling.coefficient_table(cfg.probabilities)?;
        let schedule = FluxSchedule::constant(vec![0.0; species])?;
        trajectory = Simulation {
            table: &table,
            grid,
            initial: &initial,
            schedule: &schedule,
            horizon: cfg.horizon,
            steps: cfg.pde_steps,
            e0: 1.0,
            newton: cfg.newton,
            stencil: cfg.stencil,
        }
        .run()?;
        trajectory.final_field()
    };
    let group = cfg.pde_cells / intervals;
    let mut pde_density = Field::zeros(species, intervals);
    for k in 0..intervals {
        for i in 0..species {
            let mean: f64 = (k * group..(k + 1) * group)
                .map(|q| fine.get(i, q))
                .sum::<f64>()
                / group as f64;
            pde_density.set(i, k, mean);
        }
    }

    let distances = lattice_density.l1_distance(&pde_density);
    Ok(CompareReport {
        bins: intervals,
        sweeps,
        lattice_density,
        pde_density,
        distances,
    })
}
