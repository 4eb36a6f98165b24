//! Implicit solver for the volume-fraction system on the rescaled unit
//! interval.
//!
//! Each deposition step advances all species' volume fractions with one fully
//! implicit stage: interior cells carry the time derivative, the grid-drift
//! advection that compensates for domain growth, and the quadratic
//! cross-diffusion exchange; the first and last cells carry the no-flux and
//! deposition-flux relations instead of a time derivative. The resulting
//! nonlinear system is solved by a damped Newton iteration on a banded
//! Jacobian, and the accepted iterate is projected back onto the unit simplex
//! (clip negatives, renormalize) before the next step.
//!
//! The boundary rows of the nonlinear system are linearly dependent — the
//! no-flux rows always sum to zero, and the deposition rows do so whenever
//! the instantaneous growth rate vanishes — so one row of each dependent
//! group is replaced by the explicit normalization `Σ_i v_i = 1` that the
//! remaining rows imply. This keeps the Jacobian nonsingular without
//! changing the solution set.

pub mod banded;

use crate::flux::{thickness_track, FluxError, FluxSamples, FluxSchedule, ThicknessTrack};
use crate::model::KMatrix;
use banded::{BandLu, BandMatrix};
use thiserror::Error;

/// Failures of grid setup, step solves, or trajectory assembly.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("grid needs at least 3 cells, got {got}")]
    GridTooSmall { got: usize },
    #[error("field has {field} species but the coefficient table has {table}")]
    SpeciesMismatch { field: usize, table: usize },
    #[error("field has {field} cells but the grid has {grid}")]
    CellsMismatch { field: usize, grid: usize },
    #[error("initial thickness must be positive and finite, got {e0}")]
    BadInitialThickness { e0: f64 },
    #[error("initial profile for species {species} is negative at y = {y}")]
    NegativeProfile { species: usize, y: f64 },
    #[error("cell {cell} has no positive part to renormalize")]
    DegenerateCell { cell: usize },
    #[error(
        "Newton stalled at step {step}: residual {residual:.3e} after {iterations} iterations"
    )]
    NonConvergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("Jacobian singular at step {step} (elimination column {column})")]
    SingularJacobian { step: usize, column: usize },
    #[error(transparent)]
    Flux(#[from] FluxError),
}

/// Uniform cell-centered grid on the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    cells: usize,
}

impl Grid {
    /// At least three cells: one no-flux row, one deposition row, and at
    /// least one genuine interior cell between them.
    pub fn new(cells: usize) -> Result<Self, SolverError> {
        if cells < 3 {
            return Err(SolverError::GridTooSmall { got: cells });
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dy(&self) -> f64 {
        1.0 / self.cells as f64
    }

    /// Center of cell `q` (zero-based): `(q + 1/2)·Δy`.
    pub fn center(&self, q: usize) -> f64 {
        (q as f64 + 0.5) * self.dy()
    }
}

/// Volume fractions of every species on every grid cell, stored cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    species: usize,
    cells: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(species: usize, cells: usize) -> Self {
        Self {
            species,
            cells,
            data: vec![0.0; species * cells],
        }
    }

    /// Spatially constant field with the given per-species values.
    pub fn constant(cells: usize, values: &[f64]) -> Self {
        let mut data = Vec::with_capacity(values.len() * cells);
        for _ in 0..cells {
            data.extend_from_slice(values);
        }
        Self {
            species: values.len(),
            cells,
            data,
        }
    }

    /// Fills a field from `f(species, cell)`.
    pub fn from_fn(species: usize, cells: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(species, cells);
        for q in 0..cells {
            for i in 0..species {
                out.set(i, q, f(i, q));
            }
        }
        out
    }

    pub fn species(&self) -> usize {
        self.species
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn get(&self, i: usize, q: usize) -> f64 {
        self.data[q * self.species + i]
    }

    pub fn set(&mut self, i: usize, q: usize, value: f64) {
        self.data[q * self.species + i] = value;
    }

    /// All species values on cell `q`.
    pub fn cell(&self, q: usize) -> &[f64] {
        &self.data[q * self.species..(q + 1) * self.species]
    }

    /// Spatial mean of species `i` (midpoint rule on the unit interval).
    pub fn species_mean(&self, i: usize) -> f64 {
        (0..self.cells).map(|q| self.get(i, q)).sum::<f64>() / self.cells as f64
    }

    /// Largest deviation from the unit simplex over all cells: the worst
    /// negative part or normalization defect, whichever is bigger.
    pub fn max_simplex_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for q in 0..self.cells {
            let mut sum = 0.0;
            for &v in self.cell(q) {
                worst = worst.max(-v);
                sum += v;
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Per-species L¹ distance to `other` (midpoint rule on the unit
    /// interval). Panics on shape mismatch: comparing incompatible fields is
    /// a programming error.
    pub fn l1_distance(&self, other: &Field) -> Vec<f64> {
        assert_eq!(self.species, other.species, "species mismatch");
        assert_eq!(self.cells, other.cells, "cell count mismatch");
        (0..self.species)
            .map(|i| {
                (0..self.cells)
                    .map(|q| (self.get(i, q) - other.get(i, q)).abs())
                    .sum::<f64>()
                    / self.cells as f64
            })
            .collect()
    }
}

/// Evaluates nonnegative profiles at the cell centers and normalizes each
/// cell to total fraction one.
pub fn discretize_initial(
    profiles: &[&dyn Fn(f64) -> f64],
    grid: Grid,
) -> Result<Field, SolverError> {
    let species = profiles.len();
    let mut field = Field::zeros(species, grid.cells());
    for q in 0..grid.cells() {
        let y = grid.center(q);
        let mut sum = 0.0;
        for (i, profile) in profiles.iter().enumerate() {
            let w = profile(y);
            if w < 0.0 || !w.is_finite() {
                return Err(SolverError::NegativeProfile { species: i, y });
            }
            field.set(i, q, w);
            sum += w;
        }
        if sum <= 0.0 {
            return Err(SolverError::DegenerateCell { cell: q });
        }
        for i in 0..species {
            field.set(i, q, field.get(i, q) / sum);
        }
    }
    Ok(field)
}

/// Clips negative fractions to zero and renormalizes each cell to total one.
pub fn project_simplex(field: &Field) -> Result<Field, SolverError> {
    let mut out = Field::zeros(field.species(), field.cells());
    for q in 0..field.cells() {
        let mut sum = 0.0;
        for i in 0..field.species() {
            let v = field.get(i, q).max(0.0);
            out.set(i, q, v);
            sum += v;
        }
        if sum <= 0.0 {
            return Err(SolverError::DegenerateCell { cell: q });
        }
        for i in 0..field.species() {
            out.set(i, q, out.get(i, q) / sum);
        }
    }
    Ok(out)
}

/// Spatial discretization of the quadratic exchange term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossDiffusionStencil {
    /// Centered second differences of both coupled species with the full
    /// exchange coefficient. Consistent with the continuous flux law (the
    /// two-species reduction recovers the heat equation with the tabulated
    /// coefficient) and keeps spatially constant states exact.
    #[default]
    Consistent,
    /// Variant that halves the exchange coefficient and anchors the first
    /// second difference at the partner species' center value. It relaxes at
    /// half the correct rate and does not preserve constant states; kept
    /// selectable to quantify the impact of those two modifications.
    HalvedCrossCenter,
}

/// Everything a single implicit stage needs besides the unknowns themselves.
#[derive(Debug, Clone)]
pub struct StepConditions<'a> {
    pub table: &'a KMatrix,
    pub grid: Grid,
    /// Step size of this (possibly micro-) step.
    pub dt: f64,
    /// Film thickness at the end of the stage.
    pub e: f64,
    /// Instantaneous growth rate `Σ_i φ̂_i` of the enclosing deposition step.
    pub ed: f64,
    /// Per-species deposition rates `φ̂_i` of the enclosing step.
    pub deposit: &'a [f64],
    pub stencil: CrossDiffusionStencil,
}

impl StepConditions<'_> {
    fn species(&self) -> usize {
        self.table.species().total()
    }
}

/// Whether row `(i, q)` of the nonlinear system is replaced by the explicit
/// normalization `Σ_j v_j = 1`. The no-flux rows at the first cell always sum
/// to zero, so one of them carries no information; the deposition rows at the
/// last cell become dependent exactly when the growth rate vanishes.
pub(crate) fn is_replaced_row(i: usize, q: usize, cells: usize, ed: f64) -> bool {
    i == 0 && (q == 0 || (q == cells - 1 && ed == 0.0))
}

fn second_difference(x: &Field, i: usize, q: usize) -> f64 {
    x.get(i, q + 1) + x.get(i, q - 1) - 2.0 * x.get(i, q)
}

/// Residual of the implicit stage at the candidate state `vtilde`, given the
/// previous state `vprev`. Row `(i, q)` lives at index `q·species + i`.
pub fn assemble_residual(vtilde: &Field, vprev: &Field, cond: &StepConditions) -> Vec<f64> {
    let n1 = cond.species();
    let cells = cond.grid.cells();
    assert_eq!(vtilde.species(), n1);
    assert_eq!(vprev.species(), n1);
    assert_eq!(vtilde.cells(), cells);
    assert_eq!(vprev.cells(), cells);
    assert_eq!(cond.deposit.len(), n1);

    let dy = cond.grid.dy();
    let flux_scale = 1.0 / (cond.e * dy);
    let diff_scale = match cond.stencil {
        CrossDiffusionStencil::Consistent => 1.0 / (cond.e * cond.e * dy * dy),
        CrossDiffusionStencil::HalvedCrossCenter => 0.5 / (cond.e * cond.e * dy * dy),
    };

    let x = vtilde;
    let mut residual = vec![0.0; n1 * cells];
    for q in 0..cells {
        for i in 0..n1 {
            let row = q * n1 + i;
            if is_replaced_row(i, q, cells, cond.ed) {
                residual[row] = x.cell(q).iter().sum::<f64>() - 1.0;
                continue;
            }
            if q == 0 || q == cells - 1 {
                // Boundary flux relation: at the first cell the one-sided
                // difference points toward the neighbor, at the last cell it
                // points from the neighbor to the boundary.
                let (qb, qn) = if q == 0 { (0, 1) } else { (cells - 1, cells - 2) };
                let sigma = if q == 0 { -1.0 } else { 1.0 };
                let mut flux = 0.0;
                for j in 0..n1 {
                    if j == i {
                        continue;
                    }
                    let d_i = sigma * (x.get(i, qb) - x.get(i, qn));
                    let d_j = sigma * (x.get(j, qb) - x.get(j, qn));
                    flux += cond.table.get(i, j) * (x.get(j, qb) * d_i - x.get(i, qb) * d_j);
                }
                residual[row] = if q == 0 {
                    flux * flux_scale
                } else {
                    flux * flux_scale + cond.ed * x.get(i, qb) - cond.deposit[i]
                };
                continue;
            }
            let time = (x.get(i, q) - vprev.get(i, q)) / cond.dt;
            let drift = (cond.ed / cond.e) * cond.grid.center(q) * (x.get(i, q + 1) - x.get(i, q))
                / dy;
            let mut exchange = 0.0;
            for j in 0..n1 {
                if j == i {
                    continue;
                }
                let b = match cond.stencil {
                    CrossDiffusionStencil::Consistent => {
                        x.get(j, q) * second_difference(x, i, q)
                            - x.get(i, q) * second_difference(x, j, q)
                    }
                    CrossDiffusionStencil::HalvedCrossCenter => {
                        x.get(j, q)
                            * (x.get(i, q + 1) + x.get(i, q - 1) - 2.0 * x.get(j, q))
                            - x.get(i, q) * second_difference(x, j, q)
                    }
                };
                exchange += cond.table.get(i, j) * b;
            }
            residual[row] = time - drift - diff_scale * exchange;
        }
    }
    residual
}

/// Jacobian of [`assemble_residual`] with respect to `vtilde`, as a banded
/// matrix with `2·species − 1` diagonals on each side.
pub fn assemble_jacobian(vtilde: &Field, cond: &StepConditions) -> BandMatrix {
    let n1 = cond.species();
    let cells = cond.grid.cells();
    assert_eq!(vtilde.species(), n1);
    assert_eq!(vtilde.cells(), cells);

    let dy = cond.grid.dy();
    let flux_scale = 1.0 / (cond.e * dy);
    let diff_scale = match cond.stencil {
        CrossDiffusionStencil::Consistent => 1.0 / (cond.e * cond.e * dy * dy),
        CrossDiffusionStencil::HalvedCrossCenter => 0.5 / (cond.e * cond.e * dy * dy),
    };

    let x = vtilde;
    let band = 2 * n1 - 1;
    let mut jac = BandMatrix::zeros(n1 * cells, band, band);
    let idx = |i: usize, q: usize| q * n1 + i;
    for q in 0..cells {
        for i in 0..n1 {
            let row = idx(i, q);
            if is_replaced_row(i, q, cells, cond.ed) {
                for j in 0..n1 {
                    jac.set(row, idx(j, q), 1.0);
                }
                continue;
            }
            if q == 0 || q == cells - 1 {
                let (qb, qn) = if q == 0 { (0, 1) } else { (cells - 1, cells - 2) };
                let sigma = if q == 0 { -1.0 } else { 1.0 };
                for j in 0..n1 {
                    if j == i {
                        continue;
                    }
                    let g = cond.table.get(i, j) * flux_scale;
                    let d_j = sigma * (x.get(j, qb) - x.get(j, qn));
                    let d_i = sigma * (x.get(i, qb) - x.get(i, qn));
                    jac.add(row, idx(i, qb), g * (sigma * x.get(j, qb) - d_j));
                    jac.add(row, idx(i, qn), -g * sigma * x.get(j, qb));
                    jac.add(row, idx(j, qb), g * (d_i - sigma * x.get(i, qb)));
                    jac.add(row, idx(j, qn), g * sigma * x.get(i, qb));
                }
                if q == cells - 1 {
                    jac.add(row, idx(i, qb), cond.ed);
                }
                continue;
            }
            let advect = (cond.ed / cond.e) * cond.grid.center(q) / dy;
            jac.add(row, idx(i, q), 1.0 / cond.dt + advect);
            jac.add(row, idx(i, q + 1), -advect);
            for j in 0..n1 {
                if j == i {
                    continue;
                }
                let c = cond.table.get(i, j) * diff_scale;
                match cond.stencil {
                    CrossDiffusionStencil::Consistent => {
                        jac.add(row, idx(i, q), c * (2.0 * x.get(j, q) + second_difference(x, j, q)));
                        jac.add(row, idx(i, q + 1), -c * x.get(j, q));
                        jac.add(row, idx(i, q - 1), -c * x.get(j, q));
                        jac.add(row, idx(j, q), -c * (second_difference(x, i, q) + 2.0 * x.get(i, q)));
                        jac.add(row, idx(j, q + 1), c * x.get(i, q));
                        jac.add(row, idx(j, q - 1), c * x.get(i, q));
                    }
                    CrossDiffusionStencil::HalvedCrossCenter => {
                        let side_i = x.get(i, q + 1) + x.get(i, q - 1);
                        jac.add(row, idx(i, q), c * second_difference(x, j, q));
                        jac.add(row, idx(i, q + 1), -c * x.get(j, q));
                        jac.add(row, idx(i, q - 1), -c * x.get(j, q));
                        jac.add(
                            row,
                            idx(j, q),
                            -c * (side_i - 4.0 * x.get(j, q) + 2.0 * x.get(i, q)),
                        );
                        jac.add(row, idx(j, q + 1), c * x.get(i, q));
                        jac.add(row, idx(j, q - 1), c * x.get(i, q));
                    }
                }
            }
        }
    }
    jac
}

/// Derivatives of the stage residual with respect to the stage thickness `e`
/// and the growth rate `ed`, at fixed unknowns. The adjoint sweep of the
/// optimizer needs these to push sensitivities onto the deposition rates.
pub(crate) fn residual_env_derivatives(
    vtilde: &Field,
    cond: &StepConditions,
) -> (Vec<f64>, Vec<f64>) {
    let n1 = cond.species();
    let cells = cond.grid.cells();
    let dy = cond.grid.dy();
    let flux_scale = 1.0 / (cond.e * dy);
    let diff_scale = match cond.stencil {
        CrossDiffusionStencil::Consistent => 1.0 / (cond.e * cond.e * dy * dy),
        CrossDiffusionStencil::HalvedCrossCenter => 0.5 / (cond.e * cond.e * dy * dy),
    };
    let x = vtilde;
    let mut de = vec![0.0; n1 * cells];
    let mut ded = vec![0.0; n1 * cells];
    for q in 0..cells {
        for i in 0..n1 {
            let row = q * n1 + i;
            if is_replaced_row(i, q, cells, cond.ed) {
                continue;
            }
            if q == 0 || q == cells - 1 {
                let (qb, qn) = if q == 0 { (0, 1) } else { (cells - 1, cells - 2) };
                let sigma = if q == 0 { -1.0 } else { 1.0 };
                let mut flux = 0.0;
                for j in 0..n1 {
                    if j == i {
                        continue;
                    }
                    let d_i = sigma * (x.get(i, qb) - x.get(i, qn));
                    let d_j = sigma * (x.get(j, qb) - x.get(j, qn));
                    flux += cond.table.get(i, j) * (x.get(j, qb) * d_i - x.get(i, qb) * d_j);
                }
                de[row] = -flux * flux_scale / cond.e;
                if q == cells - 1 {
                    ded[row] = x.get(i, qb);
                }
                continue;
            }
            let upwind = cond.grid.center(q) * (x.get(i, q + 1) - x.get(i, q)) / dy;
            let mut exchange = 0.0;
            for j in 0..n1 {
                if j == i {
                    continue;
                }
                let b = match cond.stencil {
                    CrossDiffusionStencil::Consistent => {
                        x.get(j, q) * second_difference(x, i, q)
                            - x.get(i, q) * second_difference(x, j, q)
                    }
                    CrossDiffusionStencil::HalvedCrossCenter => {
                        x.get(j, q)
                            * (x.get(i, q + 1) + x.get(i, q - 1) - 2.0 * x.get(j, q))
                            - x.get(i, q) * second_difference(x, j, q)
                    }
                };
                exchange += cond.table.get(i, j) * b;
            }
            de[row] = (cond.ed / (cond.e * cond.e)) * upwind + 2.0 * diff_scale * exchange / cond.e;
            ded[row] = -upwind / cond.e;
        }
    }
    (de, ded)
}

/// Newton iteration controls for the per-step nonlinear solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Convergence threshold on the max-norm of the residual.
    pub residual_tol: f64,
    /// Maximum Newton iterations per stage before the step is subdivided.
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Iteration record of one accepted deposition step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStats {
    /// Newton iterations summed over the stages of the step.
    pub iterations: usize,
    /// Final residual max-norm.
    pub residual: f64,
    /// Number of stages the step was split into (1 = no subdivision).
    pub substeps: usize,
}

enum NewtonFailure {
    Stalled { residual: f64, iterations: usize },
    Singular { column: usize },
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Runs the damped Newton iteration from `vprev`; returns the unprojected
/// solution and iteration counters.
fn newton_solve(
    vprev: &Field,
    cond: &StepConditions,
    cfg: &NewtonConfig,
) -> Result<(Field, usize, f64), NewtonFailure> {
    let mut x = vprev.clone();
    let mut residual = assemble_residual(&x, vprev, cond);
    let mut rnorm = max_abs(&residual);
    let mut iterations = 0;
    while rnorm > cfg.residual_tol {
        if iterations >= cfg.max_iter {
            return Err(NewtonFailure::Stalled {
                residual: rnorm,
                iterations,
            });
        }
        let jac = assemble_jacobian(&x, cond);
        let lu = jac
            .factor()
            .map_err(|s| NewtonFailure::Singular { column: s.column })?;
        let mut delta = residual.clone();
        lu.solve(&mut delta);
        // Backtrack on the residual norm so a too-long Newton step cannot
        // throw the iterate far outside the physical region.
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..11 {
            let mut trial = x.clone();
            for q in 0..trial.cells() {
                for i in 0..trial.species() {
                    let row = q * trial.species() + i;
                    trial.set(i, q, x.get(i, q) - lambda * delta[row]);
                }
            }
            let trial_residual = assemble_residual(&trial, vprev, cond);
            let trial_norm = max_abs(&trial_residual);
            if trial_norm < rnorm {
                accepted = Some((trial, trial_residual, trial_norm));
                break;
            }
            lambda *= 0.5;
        }
        let Some((trial, trial_residual, trial_norm)) = accepted else {
            return Err(NewtonFailure::Stalled {
                residual: rnorm,
                iterations,
            });
        };
        x = trial;
        residual = trial_residual;
        rnorm = trial_norm;
        iterations += 1;
    }
    Ok((x, iterations, rnorm))
}

/// Solves one implicit stage from `vprev` and returns the unprojected
/// solution with its iteration counters.
pub fn newton_step_solve(
    vprev: &Field,
    cond: &StepConditions,
    cfg: &NewtonConfig,
) -> Result<(Field, NewtonStats), SolverError> {
    match newton_solve(vprev, cond, cfg) {
        Ok((x, iterations, residual)) => Ok((
            x,
            NewtonStats {
                iterations,
                residual,
                substeps: 1,
            },
        )),
        Err(NewtonFailure::Stalled {
            residual,
            iterations,
        }) => Err(SolverError::NonConvergence {
            step: 0,
            residual,
            iterations,
        }),
        Err(NewtonFailure::Singular { column }) => {
            Err(SolverError::SingularJacobian { step: 0, column })
        }
    }
}

/// One solved stage retained for the adjoint sweep: the stage conditions,
/// the unprojected Newton solution, and the Jacobian factored at it.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    /// Deposition step this stage belongs to.
    pub column: usize,
    /// Stage size (the full step `Δt`, or half of it after subdivision).
    pub dt: f64,
    /// Thickness at the end of the stage.
    pub e: f64,
    /// Growth rate of the enclosing deposition step.
    pub ed: f64,
    /// Sensitivity `∂e/∂φ̂_{·,column}` of the stage thickness to its own
    /// column's rates (earlier columns all contribute the full `Δt`).
    pub e_coeff: f64,
    /// Unprojected Newton solution of the stage.
    pub vtilde: Field,
    /// Jacobian factored at `vtilde`.
    pub lu: BandLu,
}

/// Full solver input: model coefficients, grid, initial fractions, deposition
/// schedule, and horizon discretization.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pub table: &'a KMatrix,
    pub grid: Grid,
    pub initial: &'a Field,
    pub schedule: &'a FluxSchedule,
    pub horizon: f64,
    pub steps: usize,
    pub e0: f64,
    pub newton: NewtonConfig,
    pub stencil: CrossDiffusionStencil,
}

/// Time-discrete solution: projected states at every step boundary plus the
/// thickness history and Newton counters.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `t_m = m·Δt` for `m = 0..=steps`.
    pub times: Vec<f64>,
    /// Projected states, one per entry of `times`.
    pub fields: Vec<Field>,
    pub thickness: ThicknessTrack,
    /// Per-step iteration records.
    pub newton: Vec<NewtonStats>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn final_field(&self) -> &Field {
        self.fields.last().expect("trajectory has at least one state")
    }

    /// Worst simplex violation over the whole trajectory.
    pub fn max_simplex_violation(&self) -> f64 {
        self.fields
            .iter()
            .map(Field::max_simplex_violation)
            .fold(0.0, f64::max)
    }
}

impl Simulation<'_> {
    fn validate(&self) -> Result<(), SolverError> {
        let n1 = self.table.species().total();
        if self.initial.species() != n1 {
            return Err(SolverError::SpeciesMismatch {
                field: self.initial.species(),
                table: n1,
            });
        }
        if self.initial.cells() != self.grid.cells() {
            return Err(SolverError::CellsMismatch {
                field: self.initial.cells(),
                grid: self.grid.cells(),
            });
        }
        if !(self.e0.is_finite() && self.e0 > 0.0) {
            return Err(SolverError::BadInitialThickness { e0: self.e0 });
        }
        Ok(())
    }

    /// Runs the deposition simulation over the whole horizon.
    pub fn run(&self) -> Result<Trajectory, SolverError> {
        let samples = self.schedule.sample(self.steps, self.horizon)?;
        self.run_samples(&samples, &mut None)
    }

    /// As [`run`](Self::run), but also returns the per-stage records the
    /// adjoint sweep consumes.
    pub(crate) fn run_recorded(&self) -> Result<(Trajectory, Vec<StepRecord>), SolverError> {
        let samples = self.schedule.sample(self.steps, self.horizon)?;
        let mut records = Some(Vec::new());
        let trajectory = self.run_samples(&samples, &mut records)?;
        Ok((trajectory, records.expect("recording enabled")))
    }

    fn run_samples(
        &self,
        samples: &FluxSamples,
        records: &mut Option<Vec<StepRecord>>,
    ) -> Result<Trajectory, SolverError> {
        self.validate()?;
        if samples.species() != self.table.species().total() {
            return Err(SolverError::SpeciesMismatch {
                field: samples.species(),
                table: self.table.species().total(),
            });
        }
        let dt = self.horizon / self.steps as f64;
        let track = thickness_track(samples, self.e0, dt)?;

        let mut state = project_simplex(self.initial)?;
        let mut fields = Vec::with_capacity(self.steps + 1);
        let mut stats = Vec::with_capacity(self.steps);
        fields.push(state.clone());

        let deposit_buf: Vec<Vec<f64>> = (0..self.steps).map(|m| samples.column(m)).collect();
        for m in 0..self.steps {
            let deposit = &deposit_buf[m];
            let ed = track.ed[m];
            let e_end = track.e[m + 1];
            let full = StepConditions {
                table: self.table,
                grid: self.grid,
                dt,
                e: e_end,
                ed,
                deposit,
                stencil: self.stencil,
            };
            match newton_solve(&state, &full, &self.newton) {
                Ok((vtilde, iterations, residual)) => {
                    state = project_simplex(&vtilde)?;
                    if let Some(recs) = records.as_mut() {
                        recs.push(self.record(m, &full, dt, vtilde)?);
                    }
                    fields.push(state.clone());
                    stats.push(NewtonStats {
                        iterations,
                        residual,
                        substeps: 1,
                    });
                }
                Err(NewtonFailure::Singular { column }) => {
                    return Err(SolverError::SingularJacobian { step: m, column });
                }
                Err(NewtonFailure::Stalled { .. }) => {
                    // Retry as two half stages; the midpoint thickness keeps
                    // the growth law exact on each half.
                    let e_half = track.e[m] + ed * dt / 2.0;
                    let half1 = StepConditions {
                        e: e_half,
                        dt: dt / 2.0,
                        ..full.clone()
                    };
                    let half2 = StepConditions {
                        dt: dt / 2.0,
                        ..full.clone()
                    };
                    let mut total_iters = 0;
                    let mut last_residual = f64::INFINITY;
                    for (half, e_coeff) in [(half1, dt / 2.0), (half2, dt)] {
                        match newton_solve(&state, &half, &self.newton) {
                            Ok((vtilde, iterations, residual)) => {
                                state = project_simplex(&vtilde)?;
                                total_iters += iterations;
                                last_residual = residual;
                                if let Some(recs) = records.as_mut() {
                                    recs.push(self.record_stage(m, &half, e_coeff, vtilde)?);
                                }
                            }
                            Err(NewtonFailure::Singular { column }) => {
                                return Err(SolverError::SingularJacobian { step: m, column });
                            }
                            Err(NewtonFailure::Stalled {
                                residual,
                                iterations,
                            }) => {
                                return Err(SolverError::NonConvergence {
                                    step: m,
                                    residual,
                                    iterations: iterations + total_iters,
                                });
                            }
                        }
                    }
                    fields.push(state.clone());
                    stats.push(NewtonStats {
                        iterations: total_iters,
                        residual: last_residual,
                        substeps: 2,
                    });
                }
            }
        }

        let times = (0..=self.steps).map(|m| m as f64 * dt).collect();
        Ok(Trajectory {
            times,
            fields,
            thickness: track,
            newton: stats,
        })
    }

    fn record(
        &self,
        column: usize,
        cond: &StepConditions,
        e_coeff: f64,
        vtilde: Field,
    ) -> Result<StepRecord, SolverError> {
        self.record_stage(column, cond, e_coeff, vtilde)
    }

    fn record_stage(
        &self,
        column: usize,
        cond: &StepConditions,
        e_coeff: f64,
        vtilde: Field,
    ) -> Result<StepRecord, SolverError> {
        let lu = assemble_jacobian(&vtilde, cond)
            .factor()
            .map_err(|s| SolverError::SingularJacobian {
                step: column,
                column: s.column,
            })?;
        Ok(StepRecord {
            column,
            dt: cond.dt,
            e: cond.e,
            ed: cond.ed,
            e_coeff,
            vtilde,
            lu,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::PiecewiseSpecies;
    use crate::model::tests::experiment_table;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex_field(species: usize, cells: usize, rng: &mut impl Rng) -> Field {
        let mut field = Field::zeros(species, cells);
        for q in 0..cells {
            let mut draws: Vec<f64> = (0..species).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = draws.iter().sum();
            for d in &mut draws {
                *d /= sum;
            }
            for (i, d) in draws.iter().enumerate() {
                field.set(i, q, *d);
            }
        }
        field
    }

    /// Direct transcription of the stage equations, kept deliberately
    /// separate from the production assembly.
    fn reference_residual(
        x: &Field,
        w: &Field,
        k: &KMatrix,
        grid: Grid,
        dt: f64,
        e: f64,
        ed: f64,
        deposit: &[f64],
        stencil: CrossDiffusionStencil,
    ) -> Vec<f64> {
        let n1 = x.species();
        let qn = grid.cells();
        let dy = grid.dy();
        let mut r = vec![0.0; n1 * qn];
        for i in 0..n1 {
            // No-flux relation at the first cell.
            let mut acc = 0.0;
            for j in (0..n1).filter(|&j| j != i) {
                acc += k.get(i, j) / e
                    * (x.get(j, 0) * (x.get(i, 1) - x.get(i, 0)) / dy
                        - x.get(i, 0) * (x.get(j, 1) - x.get(j, 0)) / dy);
            }
            r[i] = acc;
            // Deposition relation at the last cell.
            let (qb, qm) = (qn - 1, qn - 2);
            let mut acc = 0.0;
            for j in (0..n1).filter(|&j| j != i) {
                acc += k.get(i, j) / e
                    * (x.get(j, qb) * (x.get(i, qb) - x.get(i, qm)) / dy
                        - x.get(i, qb) * (x.get(j, qb) - x.get(j, qm)) / dy);
            }
            r[qb * n1 + i] = acc + ed * x.get(i, qb) - deposit[i];
            // Interior balance.
            for q in 1..qn - 1 {
                let y = (q as f64 + 0.5) * dy;
                let mut acc = 0.0;
                for j in (0..n1).filter(|&j| j != i) {
                    let center_first = match stencil {
                        CrossDiffusionStencil::Consistent => x.get(i, q),
                        CrossDiffusionStencil::HalvedCrossCenter => x.get(j, q),
                    };
                    let scale = match stencil {
                        CrossDiffusionStencil::Consistent => 1.0,
                        CrossDiffusionStencil::HalvedCrossCenter => 0.5,
                    };
                    acc += k.get(i, j) / (e * e)
                        * scale
                        * (x.get(j, q)
                            * (x.get(i, q + 1) + x.get(i, q - 1) - 2.0 * center_first)
                            - x.get(i, q)
                                * (x.get(j, q + 1) + x.get(j, q - 1) - 2.0 * x.get(j, q)))
                        / (dy * dy);
                }
                r[q * n1 + i] = (x.get(i, q) - w.get(i, q)) / dt
                    - ed / e * y * (x.get(i, q + 1) - x.get(i, q)) / dy
                    - acc;
            }
        }
        // Replaced rows.
        r[0] = x.cell(0).iter().sum::<f64>() - 1.0;
        if ed == 0.0 {
            r[(qn - 1) * n1] = x.cell(qn - 1).iter().sum::<f64>() - 1.0;
        }
        r
    }

    #[test]
    fn residual_matches_direct_transcription() {
        let k = experiment_table();
        let grid = Grid::new(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stencil, ed) in [
            (CrossDiffusionStencil::Consistent, 1.7),
            (CrossDiffusionStencil::HalvedCrossCenter, 1.7),
            (CrossDiffusionStencil::Consistent, 0.0),
        ] {
            let x = random_simplex_field(4, 7, &mut rng);
            let w = random_simplex_field(4, 7, &mut rng);
            let deposit = [0.3, 0.5, 0.2, 0.7];
            let cond = StepConditions {
                table: &k,
                grid,
                dt: 0.8,
                e: 2.3,
                ed,
                deposit: &deposit,
                stencil,
            };
            let got = assemble_residual(&x, &w, &cond);
            let want = reference_residual(&x, &w, &k, grid, 0.8, 2.3, ed, &deposit, stencil);
            for (row, (g, r)) in got.iter().zip(&want).enumerate() {
                assert!(
                    (g - r).abs() <= 1e-13 * (1.0 + r.abs()),
                    "stencil {stencil:?} row {row}: {g} vs {r}"
                );
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = experiment_table();
        let grid = Grid::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let deposit = [0.3, 0.5, 0.2, 0.7];
        for stencil in [
            CrossDiffusionStencil::Consistent,
            CrossDiffusionStencil::HalvedCrossCenter,
        ] {
            for trial in 0..25 {
                let ed = if trial % 5 == 0 { 0.0 } else { 1.7 };
                let x = random_simplex_field(4, 8, &mut rng);
                let w = random_simplex_field(4, 8, &mut rng);
                let cond = StepConditions {
                    table: &k,
                    grid,
                    dt: 0.8,
                    e: 2.3,
                    ed,
                    deposit: &deposit,
                    stencil,
                };
                let jac = assemble_jacobian(&x, &cond);
                let n = 4 * 8;
                let h = 1e-7;
                for col in 0..n {
                    let (ci, cq) = (col % 4, col / 4);
                    let mut xp = x.clone();
                    xp.set(ci, cq, x.get(ci, cq) + h);
                    let mut xm = x.clone();
                    xm.set(ci, cq, x.get(ci, cq) - h);
                    let rp = assemble_residual(&xp, &w, &cond);
                    let rm = assemble_residual(&xm, &w, &cond);
                    for row in 0..n {
                        let fd = (rp[row] - rm[row]) / (2.0 * h);
                        let analytic = if jac.in_band(row, col) { jac.get(row, col) } else { 0.0 };
                        assert!(
                            (fd - analytic).abs() <= 3e-6 * (1.0 + analytic.abs()),
                            "stencil {stencil:?} entry ({row},{col}): fd {fd} vs {analytic}"
                        );
                    }
                }
            }
        }
    }

    fn uniform_equilibrium() -> (Vec<f64>, Vec<f64>) {
        let beta = vec![0.9, 0.8, 1.7, 0.5];
        let total: f64 = beta.iter().sum();
        let fractions = beta.iter().map(|b| b / total).collect();
        (beta, fractions)
    }

    #[test]
    fn matched_constant_state_is_a_fixed_point() {
        let k = experiment_table();
        let grid = Grid::new(40).unwrap();
        let (beta, fractions) = uniform_equilibrium();
        let initial = Field::constant(40, &fractions);
        let schedule = FluxSchedule::constant(beta).unwrap();
        let sim = Simulation {
            table: &k,
            grid,
            initial: &initial,
            schedule: &schedule,
            horizon: 50.0,
            steps: 50,
            e0: 1.0,
            newton: NewtonConfig::default(),
            stencil: CrossDiffusionStencil::Consistent,
        };
        let trajectory = sim.run().unwrap();
        for (m, field) in trajectory.fields.iter().enumerate() {
            for q in 0..40 {
                for i in 0..4 {
                    assert!(
                        (field.get(i, q) - fractions[i]).abs() <= 1e-13,
                        "step {m}, cell {q}, species {i}"
                    );
                }
            }
        }
        // The iteration should recognize the fixed point immediately.
        assert!(trajectory.newton.iter().all(|s| s.iterations <= 1));
    }

    #[test]
    fn halved_variant_does_not_preserve_the_constant_state() {
        let k = experiment_table();
        let grid = Grid::new(40).unwrap();
        let (beta, fractions) = uniform_equilibrium();
        let state = Field::constant(40, &fractions);
        let cond = StepConditions {
            table: &k,
            grid,
            dt: 1.0,
            e: 4.9,
            ed: beta.iter().sum(),
            deposit: &beta,
            stencil: CrossDiffusionStencil::HalvedCrossCenter,
        };
        let residual = assemble_residual(&state, &state, &cond);
        assert!(max_abs(&residual) > 1e-2);

        let consistent = StepConditions {
            stencil: CrossDiffusionStencil::Consistent,
            ..cond
        };
        let residual = assemble_residual(&state, &state, &consistent);
        assert!(max_abs(&residual) <= 1e-14);
    }

    /// With every exchange coefficient equal, the species decouple at the
    /// solution: each satisfies a scalar linear implicit step with a no-flux
    /// relation on one end and the deposition relation on the other.
    #[test]
    fn equal_coefficients_decouple_into_scalar_solves() {
        let kappa = 0.08;
        let k = KMatrix::from_rows(&[
            vec![0.0, kappa, kappa],
            vec![kappa, 0.0, kappa],
            vec![kappa, kappa, 0.0],
        ])
        .unwrap();
        let grid = Grid::new(30).unwrap();
        let cells = grid.cells();
        let profiles: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|y: f64| 1.0 - (0.3 + 0.1 * (std::f64::consts::PI * y).cos()) - (0.25 + 0.05 * y * y)),
            Box::new(|y: f64| 0.3 + 0.1 * (std::f64::consts::PI * y).cos()),
            Box::new(|y: f64| 0.25 + 0.05 * y * y),
        ];
        let refs: Vec<&dyn Fn(f64) -> f64> = profiles.iter().map(|p| p.as_ref()).collect();
        let initial = discretize_initial(&refs, grid).unwrap();
        let beta = vec![0.4, 0.1, 0.3];
        let schedule = FluxSchedule::constant(beta.clone()).unwrap();
        let steps = 20;
        let horizon = 4.0;
        let sim = Simulation {
            table: &k,
            grid,
            initial: &initial,
            schedule: &schedule,
            horizon,
            steps,
            e0: 1.0,
            newton: NewtonConfig {
                residual_tol: 1e-12,
                max_iter: 50,
            },
            stencil: CrossDiffusionStencil::Consistent,
        };
        let trajectory = sim.run().unwrap();

        // Scalar oracle: implicit tridiagonal step per species.
        let dt = horizon / steps as f64;
        let dy = grid.dy();
        let samples = schedule.sample(steps, horizon).unwrap();
        let track = thickness_track(&samples, 1.0, dt).unwrap();
        let mut scalar: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..cells).map(|q| initial.get(i, q)).collect())
            .collect();
        for m in 0..steps {
            let e = track.e[m + 1];
            let ed = track.ed[m];
            for (i, z) in scalar.iter_mut().enumerate() {
                let mut sys = BandMatrix::zeros(cells, 1, 1);
                let mut rhs = vec![0.0; cells];
                sys.set(0, 0, -1.0);
                sys.set(0, 1, 1.0);
                rhs[0] = 0.0;
                for q in 1..cells - 1 {
                    let y = grid.center(q);
                    let adv = ed / e * y / dy;
                    let dif = kappa / (e * e * dy * dy);
                    sys.set(q, q, 1.0 / dt + adv + 2.0 * dif);
                    sys.set(q, q + 1, -adv - dif);
                    sys.set(q, q - 1, -dif);
                    rhs[q] = z[q] / dt;
                }
                let g = kappa / (e * dy);
                sys.set(cells - 1, cells - 1, g + ed);
                sys.set(cells - 1, cells - 2, -g);
                rhs[cells - 1] = beta[i];
                let lu = sys.factor().unwrap();
                lu.solve(&mut rhs);
                *z = rhs;
            }
        }
        let final_field = trajectory.final_field();
        for i in 0..3 {
            for q in 0..cells {
                assert!(
                    (final_field.get(i, q) - scalar[i][q]).abs() <= 1e-8,
                    "species {i}, cell {q}: {} vs {}",
                    final_field.get(i, q),
                    scalar[i][q]
                );
            }
        }
    }

    /// Two species with no deposition reduce to the heat equation; compare
    /// against the closed-form cosine mode and check the error shrinks under
    /// refinement.
    #[test]
    fn relaxation_matches_heat_kernel_and_converges() {
        let kappa = 0.1;
        let k = KMatrix::from_rows(&[vec![0.0, kappa], vec![kappa, 0.0]]).unwrap();
        let horizon = 0.2;
        let amplitude = 0.35;
        let mode = |y: f64| (2.0 * std::f64::consts::PI * y).cos();
        let run = |cells: usize, steps: usize| -> f64 {
            let grid = Grid::new(cells).unwrap();
            let initial = Field::from_fn(2, cells, |i, q| {
                let v1 = 0.5 - amplitude * mode(grid.center(q));
                if i == 1 {
                    v1
                } else {
                    1.0 - v1
                }
            });
            let schedule = FluxSchedule::constant(vec![0.0, 0.0]).unwrap();
            let sim = Simulation {
                table: &k,
                grid,
                initial: &initial,
                schedule: &schedule,
                horizon,
                steps,
                e0: 1.0,
                newton: NewtonConfig::default(),
                stencil: CrossDiffusionStencil::Consistent,
            };
            let trajectory = sim.run().unwrap();
            let decay =
                (-kappa * (2.0 * std::f64::consts::PI).powi(2) * horizon).exp();
            let field = trajectory.final_field();
            (0..cells)
                .map(|q| {
                    let exact = 0.5 - amplitude * decay * mode(grid.center(q));
                    (field.get(1, q) - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        // The boundary closure slaves the edge cells to their neighbors,
        // which makes the max-norm error first order in Δy; check the level
        // and the halving under refinement.
        let coarse = run(50, 40);
        let fine = run(100, 160);
        let finest = run(200, 640);
        assert!(coarse <= 0.04, "coarse error {coarse}");
        assert!(fine < 0.55 * coarse, "no refinement gain: {fine} vs {coarse}");
        assert!(finest < 0.55 * fine, "no refinement gain: {finest} vs {fine}");
    }

    #[test]
    fn deposition_run_tracks_thickness_and_stays_on_the_simplex() {
        let k = experiment_table();
        let grid = Grid::new(100).unwrap();
        let levels = [
            [0.9, 2.0, 0.2, 0.7],
            [1.4, 1.5, 1.2, 0.3],
            [0.9, 2.0, 0.2, 0.7],
        ];
        let schedule = FluxSchedule::piecewise(
            (0..4)
                .map(|i| PiecewiseSpecies {
                    tau1: 66.0,
                    tau2: 132.0,
                    levels: [levels[0][i], levels[1][i], levels[2][i]],
                })
                .collect(),
        )
        .unwrap();
        let profiles: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|_| 0.0),
            Box::new(|y: f64| y),
            Box::new(|y: f64| 2.0 * y),
            Box::new(|y: f64| y.sqrt()),
        ];
        let refs: Vec<&dyn Fn(f64) -> f64> = profiles.iter().map(|p| p.as_ref()).collect();
        let initial = discretize_initial(&refs, grid).unwrap();
        let sim = Simulation {
            table: &k,
            grid,
            initial: &initial,
            schedule: &schedule,
            horizon: 200.0,
            steps: 200,
            e0: 1.0,
            newton: NewtonConfig::default(),
            stencil: CrossDiffusionStencil::Consistent,
        };
        let trajectory = sim.run().unwrap();
        // Aligned piecewise phases: 66·3.8 + 66·4.4 + 68·3.8 on top of e0.
        assert_relative_eq!(
            trajectory.thickness.e[200],
            800.6,
            max_relative = 1e-12
        );
        assert!(trajectory.max_simplex_violation() <= 1e-14);
        assert!(trajectory.newton.iter().all(|s| s.iterations <= 12));
        assert!(trajectory.newton.iter().all(|s| s.residual <= 1e-10));
    }

    #[test]
    fn large_time_steps_remain_stable() {
        let k = experiment_table();
        let grid = Grid::new(60).unwrap();
        let (beta, _) = uniform_equilibrium();
        let profiles: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|y: f64| (-(y - 0.5) * (y - 0.5) / 0.04).exp()),
            Box::new(|y: f64| y * y),
            Box::new(|y: f64| 1.0 - (-(y - 0.5) * (y - 0.5) / 0.04).exp()),
            Box::new(|y: f64| (std::f64::consts::PI * y).sin().abs()),
        ];
        let refs: Vec<&dyn Fn(f64) -> f64> = profiles.iter().map(|p| p.as_ref()).collect();
        let initial = discretize_initial(&refs, grid).unwrap();
        let schedule = FluxSchedule::constant(beta).unwrap();
        let sim = Simulation {
            table: &k,
            grid,
            initial: &initial,
            schedule: &schedule,
            horizon: 200.0,
            steps: 20,
            e0: 1.0,
            newton: NewtonConfig::default(),
            stencil: CrossDiffusionStencil::Consistent,
        };
        let trajectory = sim.run().unwrap();
        assert!(trajectory.max_simplex_violation() <= 1e-14);
        let final_field = trajectory.final_field();
        assert!((0..4).all(|i| final_field.species_mean(i) > 0.0));
    }

    #[test]
    fn initial_discretization_normalizes_cells() {
        let grid = Grid::new(2).map(|_| ()).unwrap_err();
        assert_eq!(grid, SolverError::GridTooSmall { got: 2 });

        let grid = Grid::new(4).unwrap();
        let profiles: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|y: f64| y),
            Box::new(|y: f64| 2.0 * y),
            Box::new(|y: f64| y.sqrt()),
            Box::new(|_| 0.0),
        ];
        let refs: Vec<&dyn Fn(f64) -> f64> = profiles.iter().map(|p| p.as_ref()).collect();
        let field = discretize_initial(&refs, grid).unwrap();
        // Second cell center sits at y = 0.375... use the first (y = 0.125)?
        // Grid::new(4) centers: 0.125, 0.375, 0.625, 0.875. Pick a center
        // where the values are easy to freeze: none is 0.25, so just check
        // normalization and ratios instead.
        for q in 0..4 {
            let y = grid.center(q);
            let total: f64 = field.cell(q).iter().sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-14);
            assert_relative_eq!(field.get(1, q) / field.get(0, q), 2.0, max_relative = 1e-12);
            assert_relative_eq!(field.get(0, q), y / (3.0 * y + y.sqrt()), max_relative = 1e-12);
            assert_eq!(field.get(3, q), 0.0);
        }

        let bad: Vec<&dyn Fn(f64) -> f64> = vec![&|_| 1.0, &|y: f64| y - 0.5];
        let err = discretize_initial(&bad, grid).unwrap_err();
        assert!(matches!(err, SolverError::NegativeProfile { species: 1, .. }));

        let empty: Vec<&dyn Fn(f64) -> f64> = vec![&|_| 0.0, &|_| 0.0];
        let err = discretize_initial(&empty, grid).unwrap_err();
        assert_eq!(err, SolverError::DegenerateCell { cell: 0 });
    }

    #[test]
    fn projection_clips_and_renormalizes() {
        let mut field = Field::zeros(4, 1);
        for (i, v) in [0.5, 0.6, -0.1, 0.2].iter().enumerate() {
            field.set(i, 0, *v);
        }
        let projected = project_simplex(&field).unwrap();
        let expected = [
            0.3846153846153846,
            0.4615384615384615,
            0.0,
            0.15384615384615385,
        ];
        for (i, e) in expected.iter().enumerate() {
            assert_relative_eq!(projected.get(i, 0), *e, max_relative = 1e-15);
        }

        let mut degenerate = Field::zeros(2, 1);
        degenerate.set(0, 0, -0.2);
        degenerate.set(1, 0, -0.4);
        assert_eq!(
            project_simplex(&degenerate).unwrap_err(),
            SolverError::DegenerateCell { cell: 0 }
        );
    }

    #[test]
    fn mass_accounting_error_shrinks_under_refinement() {
        // The continuous solution satisfies d/dt (e·⟨v_i⟩) = φ_i; measure the
        // discrete defect of that balance and require refinement to help.
        let k = experiment_table();
        let (beta, _) = uniform_equilibrium();
        let drift = |cells: usize, steps: usize| -> f64 {
            let grid = Grid::new(cells).unwrap();
            let profiles: Vec<Box<dyn Fn(f64) -> f64>> = vec![
                Box::new(|y: f64| 0.4 + 0.2 * (2.0 * std::f64::consts::PI * y).cos()),
                Box::new(|y: f64| 0.3 - 0.2 * (2.0 * std::f64::consts::PI * y).cos()),
                Box::new(|_| 0.2),
                Box::new(|_| 0.1),
            ];
            let refs: Vec<&dyn Fn(f64) -> f64> = profiles.iter().map(|p| p.as_ref()).collect();
            let initial = discretize_initial(&refs, grid).unwrap();
            let schedule = FluxSchedule::constant(beta.clone()).unwrap();
            let horizon = 10.0;
            let sim = Simulation {
                table: &k,
                grid,
                initial: &initial,
                schedule: &schedule,
                horizon,
                steps,
                e0: 1.0,
                newton: NewtonConfig::default(),
                stencil: CrossDiffusionStencil::Consistent,
            };
            let trajectory = sim.run().unwrap();
            let final_field = trajectory.final_field();
            let e_final = *trajectory.thickness.e.last().unwrap();
            (0..4)
                .map(|i| {
                    let held = e_final * final_field.species_mean(i)
                        - 1.0 * initial.species_mean(i);
                    (held - beta[i] * horizon).abs()
                })
                .fold(0.0, f64::max)
        };
        let coarse = drift(25, 25);
        let fine = drift(100, 100);
        assert!(
            fine < 0.7 * coarse,
            "refinement did not reduce the balance defect: {fine} vs {coarse}"
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn short_runs_stay_on_the_simplex(
                seed in 0u64..1_000,
                beta in proptest::collection::vec(0.0f64..2.0, 4),
                dt in 0.05f64..2.0,
            ) {
                let k = experiment_table();
                let grid = Grid::new(6).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let initial = random_simplex_field(4, 6, &mut rng);
                let schedule = FluxSchedule::constant(beta).unwrap();
                let sim = Simulation {
                    table: &k,
                    grid,
                    initial: &initial,
                    schedule: &schedule,
                    horizon: dt * 3.0,
                    steps: 3,
                    e0: 1.0,
                    newton: NewtonConfig::default(),
                    stencil: CrossDiffusionStencil::Consistent,
                };
                let trajectory = sim.run().unwrap();
                prop_assert!(trajectory.max_simplex_violation() <= 1e-14);
            }
        }
    }
}
