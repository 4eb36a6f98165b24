//! Deposition-schedule optimization.
//!
//! Given a target composition profile and a target film thickness at the end
//! of a run, this module searches for per-step, per-species deposition rates
//! that reproduce them. The cost is the squared thickness mismatch plus the
//! squared L² mismatch of the final composition profile; its gradient is
//! computed exactly for the discrete forward model (implicit stages plus the
//! per-cell renormalization) by a backward sweep that reuses the factored
//! stage Jacobians. Minimization is a projected BFGS iteration with Armijo
//! backtracking, honoring componentwise bounds `0 ≤ φ̂ ≤ F`.

use crate::flux::{FluxError, FluxSamples, FluxSchedule};
use crate::model::KMatrix;
use crate::solver::{
    is_replaced_row, residual_env_derivatives, CrossDiffusionStencil, Field, Grid, NewtonConfig,
    Simulation, SolverError, StepConditions, Trajectory,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Failures of the cost/gradient evaluations and of the outer minimization.
#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Flux(#[from] FluxError),
    #[error("control vector has {got} entries; the problem expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("control entry {index} = {value} lies outside [0, {bound}]")]
    InfeasibleControl {
        index: usize,
        value: f64,
        bound: f64,
    },
    #[error("target thickness {target} must exceed the initial thickness {initial}")]
    TargetThickness { target: f64, initial: f64 },
    #[error("target profile leaves the unit simplex by {violation}")]
    TargetOffSimplex { violation: f64 },
    #[error("target profile has {got} species / {cells} cells; the problem expects {expected} species / {expected_cells} cells")]
    TargetShape {
        got: usize,
        cells: usize,
        expected: usize,
        expected_cells: usize,
    },
    #[error("line search found no decrease after {halvings} halvings at iteration {iteration}; best iterate preserved")]
    LineSearchFailure {
        iteration: usize,
        halvings: usize,
        report: Box<OptReport>,
    },
}

/// Per-step, per-species deposition rates, flattened as `index = i·M + m` for
/// species `i` and step `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    species: usize,
    steps: usize,
    values: Vec<f64>,
}

impl ControlVector {
    pub fn constant(species: usize, steps: usize, level: f64) -> Self {
        Self {
            species,
            steps,
            values: vec![level; species * steps],
        }
    }

    pub fn from_flat(species: usize, steps: usize, values: Vec<f64>) -> Result<Self, OptimizerError> {
        if values.len() != species * steps {
            return Err(OptimizerError::DimensionMismatch {
                got: values.len(),
                expected: species * steps,
            });
        }
        Ok(Self {
            species,
            steps,
            values,
        })
    }

    /// Rates of an existing schedule sampled on `steps` intervals of `horizon`.
    pub fn from_schedule(
        schedule: &FluxSchedule,
        steps: usize,
        horizon: f64,
    ) -> Result<Self, OptimizerError> {
        let samples = schedule.sample(steps, horizon)?;
        Ok(Self::from_samples(&samples))
    }

    pub fn from_samples(samples: &FluxSamples) -> Self {
        let species = samples.species();
        let steps = samples.steps();
        let mut values = vec![0.0; species * steps];
        for i in 0..species {
            for m in 0..steps {
                values[i * steps + m] = samples.get(i, m);
            }
        }
        Self {
            species,
            steps,
            values,
        }
    }

    pub fn to_samples(&self) -> Result<FluxSamples, OptimizerError> {
        let rows: Vec<Vec<f64>> = (0..self.species)
            .map(|i| self.values[i * self.steps..(i + 1) * self.steps].to_vec())
            .collect();
        Ok(FluxSamples::from_rows(&rows)?)
    }

    pub fn species(&self) -> usize {
        self.species
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.values[i * self.steps + m]
    }

    pub fn set(&mut self, i: usize, m: usize, value: f64) {
        self.values[i * self.steps + m] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Flattened position of the `(species, step)` entry.
    pub fn index(&self, i: usize, m: usize) -> usize {
        i * self.steps + m
    }

    fn check_feasible(&self, bound: f64) -> Result<(), OptimizerError> {
        for (index, &value) in self.values.iter().enumerate() {
            if !(0.0..=bound).contains(&value) || !value.is_finite() {
                return Err(OptimizerError::InfeasibleControl {
                    index,
                    value,
                    bound,
                });
            }
        }
        Ok(())
    }
}

/// Target-matching problem: reproduce a final composition profile and film
/// thickness by choosing the deposition rates.
#[derive(Debug, Clone)]
pub struct OptProblem<'a> {
    pub table: &'a KMatrix,
    pub grid: Grid,
    pub initial: &'a Field,
    pub horizon: f64,
    pub steps: usize,
    pub e0: f64,
    /// Composition profile the final state should match.
    pub target_profile: Field,
    /// Film thickness the run should reach.
    pub target_thickness: f64,
    /// Componentwise upper bound on the rates (`f64::INFINITY` disables it).
    pub flux_bound: f64,
    /// Stop when the cost falls to this level.
    pub eps_cost: f64,
    /// Stop when the projected-gradient norm falls to this level.
    pub eps_gradient: f64,
    /// Outer-iteration cap.
    pub max_outer: usize,
    pub newton: NewtonConfig,
    pub stencil: CrossDiffusionStencil,
    /// Whether species 0 participates in the profile mismatch. The reduced
    /// state of the continuous model is species `1..n`, so the default is
    /// `false`; switching it on adds the complementary species as well.
    pub include_species_zero: bool,
}

impl<'a> OptProblem<'a> {
    /// Validated problem with default tolerances (`eps_cost = eps_gradient =
    /// 1e−5`, 500 outer iterations, unbounded rates).
    pub fn new(
        table: &'a KMatrix,
        grid: Grid,
        initial: &'a Field,
        horizon: f64,
        steps: usize,
        e0: f64,
        target_profile: Field,
        target_thickness: f64,
    ) -> Result<Self, OptimizerError> {
        let n1 = table.species().total();
        if target_profile.species() != n1 || target_profile.cells() != grid.cells() {
            return Err(OptimizerError::TargetShape {
                got: target_profile.species(),
                cells: target_profile.cells(),
                expected: n1,
                expected_cells: grid.cells(),
            });
        }
        let violation = target_profile.max_simplex_violation();
        if violation > 1e-10 {
            return Err(OptimizerError::TargetOffSimplex { violation });
        }
        if target_thickness <= e0 {
            return Err(OptimizerError::TargetThickness {
                target: target_thickness,
                initial: e0,
            });
        }
        Ok(Self {
            table,
            grid,
            initial,
            horizon,
            steps,
            e0,
            target_profile,
            target_thickness,
            flux_bound: f64::INFINITY,
            eps_cost: 1e-5,
            eps_gradient: 1e-5,
            max_outer: 500,
            newton: NewtonConfig::default(),
            stencil: CrossDiffusionStencil::default(),
            include_species_zero: false,
        })
    }

    /// Number of control degrees of freedom `(n+1)·M`.
    pub fn dim(&self) -> usize {
        self.table.species().total() * self.steps
    }

    fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    fn included_species(&self) -> std::ops::Range<usize> {
        let start = if self.include_species_zero { 0 } else { 1 };
        start..self.table.species().total()
    }

    fn simulation<'s>(&'s self, schedule: &'s FluxSchedule) -> Simulation<'s> {
        Simulation {
            table: self.table,
            grid: self.grid,
            initial: self.initial,
            schedule,
            horizon: self.horizon,
            steps: self.steps,
            e0: self.e0,
            newton: self.newton,
            stencil: self.stencil,
        }
    }

    fn check_control(&self, ctrl: &ControlVector) -> Result<(), OptimizerError> {
        let expected = self.dim();
        if ctrl.len() != expected
            || ctrl.species() != self.table.species().total()
            || ctrl.steps() != self.steps
        {
            return Err(OptimizerError::DimensionMismatch {
                got: ctrl.len(),
                expected,
            });
        }
        ctrl.check_feasible(self.flux_bound)
    }

    fn cost_from_trajectory(&self, traj: &Trajectory) -> f64 {
        let e_final = *traj
            .thickness
            .e
            .last()
            .expect("thickness history is nonempty");
        let thickness = (e_final - self.target_thickness).powi(2);
        let dy = self.grid.dy();
        let state = traj.final_field();
        let mismatch: f64 = self
            .included_species()
            .map(|i| {
                (0..self.grid.cells())
                    .map(|q| {
                        let d = state.get(i, q) - self.target_profile.get(i, q);
                        d * d * dy
                    })
                    .sum::<f64>()
            })
            .sum();
        thickness + mismatch
    }
}

/// Cost `|e(T) − e*|² + ‖v(T,·) − v*‖²` of running the deposition schedule
/// described by `ctrl`. The profile term is a midpoint-rule L² norm over the
/// problem's included species.
pub fn cost(ctrl: &ControlVector, prob: &OptProblem) -> Result<f64, OptimizerError> {
    prob.check_control(ctrl)?;
    let schedule = FluxSchedule::per_step(ctrl.to_samples()?);
    let traj = prob.simulation(&schedule).run()?;
    Ok(prob.cost_from_trajectory(&traj))
}

/// Exact gradient of [`cost`] for the discrete forward model, with bookkeeping
/// about one-sided spots.
#[derive(Debug, Clone)]
pub struct AdjointGradient {
    /// Flattened like [`ControlVector`]: `index = i·M + m`.
    pub values: Vec<f64>,
    /// Cells whose renormalization clipped a negative entry somewhere along
    /// the trajectory; there the positive-part derivative is taken one-sided
    /// as zero and the gradient is only a subgradient.
    pub clipped_cells: usize,
    /// Control entries sitting exactly on a bound (0 or the upper bound),
    /// where the feasible derivative is one-sided.
    pub active_bounds: usize,
}

impl AdjointGradient {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// True when no clipping or bound activity was detected, i.e. the values
    /// are a classical gradient.
    pub fn is_smooth_point(&self) -> bool {
        self.clipped_cells == 0 && self.active_bounds == 0
    }
}

/// Gradient of the cost with respect to every deposition rate, via one
/// transposed linear solve per implicit stage against the stored Newton
/// Jacobians (discrete adjoint). The renormalization step is differentiated
/// exactly where no clipping is active; clipped entries use the one-sided
/// derivative 0 and are counted in the result.
pub fn gradient_adjoint(
    ctrl: &ControlVector,
    prob: &OptProblem,
) -> Result<AdjointGradient, OptimizerError> {
    prob.check_control(ctrl)?;
    let samples = ctrl.to_samples()?;
    let schedule = FluxSchedule::per_step(samples.clone());
    let sim = prob.simulation(&schedule);
    let (traj, records) = sim.run_recorded()?;

    let n1 = prob.table.species().total();
    let cells = prob.grid.cells();
    let rows = n1 * cells;
    let dy = prob.grid.dy();
    let dt = prob.dt();
    let steps = prob.steps;

    // Seed: derivative of the cost with respect to the final projected state.
    let state = traj.final_field();
    let mut g = vec![0.0; rows];
    for i in prob.included_species() {
        for q in 0..cells {
            g[q * n1 + i] = 2.0 * dy * (state.get(i, q) - prob.target_profile.get(i, q));
        }
    }

    let e_final = *traj
        .thickness
        .e
        .last()
        .expect("thickness history is nonempty");
    // The final thickness is e0 + Δt·Σ_p Σ_k φ̂_k^p, so its quadratic mismatch
    // contributes the same amount to every control entry.
    let thickness_term = 2.0 * (e_final - prob.target_thickness) * dt;

    let mut clipped_cells = 0usize;
    // Per-column aggregates of the stage sensitivities.
    let mut own_scalar = vec![0.0; steps]; // s_e·κ + s_ed for the record's own column
    let mut own_direct = vec![0.0; n1 * steps]; // deposition-row adjoint per species
    let mut column_se = vec![0.0; steps]; // Σ s_e per column, paid as Δt by earlier columns

    let mut lambda = vec![0.0; rows];
    for record in records.iter().rev() {
        // Backpropagate through the renormalization v = [ṽ]_+ / Σ[ṽ]_+.
        let vt = &record.vtilde;
        for q in 0..cells {
            let mut sum = 0.0;
            let mut any_clipped = false;
            for i in 0..n1 {
                let x = vt.get(i, q);
                if x > 0.0 {
                    sum += x;
                } else {
                    any_clipped = true;
                }
            }
            if any_clipped {
                clipped_cells += 1;
            }
            let mut dot = 0.0;
            for i in 0..n1 {
                let x = vt.get(i, q).max(0.0);
                dot += g[q * n1 + i] * (x / sum);
            }
            for i in 0..n1 {
                let row = q * n1 + i;
                lambda[row] = if vt.get(i, q) > 0.0 {
                    (g[row] - dot) / sum
                } else {
                    0.0
                };
            }
        }

        // Solve Jᵀλ = λ̄ with the Jacobian factored during the forward run.
        record.lu.solve_transposed(&mut lambda);

        // Sensitivities of the stage residual to the stage thickness and the
        // growth rate.
        let deposit = samples.column(record.column);
        let cond = StepConditions {
            table: prob.table,
            grid: prob.grid,
            dt: record.dt,
            e: record.e,
            ed: record.ed,
            deposit: &deposit,
            stencil: prob.stencil,
        };
        let (de, ded) = residual_env_derivatives(&record.vtilde, &cond);
        let mut s_e = 0.0;
        let mut s_ed = 0.0;
        for row in 0..rows {
            s_e -= lambda[row] * de[row];
            s_ed -= lambda[row] * ded[row];
        }
        let m = record.column;
        own_scalar[m] += s_e * record.e_coeff + s_ed;
        column_se[m] += s_e;
        for i in 0..n1 {
            let row = (cells - 1) * n1 + i;
            // The deposition rows carry −φ̂_i directly.
            if !is_replaced_row(i, cells - 1, cells, record.ed) {
                own_direct[i * steps + m] += lambda[row];
            }
        }

        // The previous projected state enters only through the time-difference
        // term −v_prev/dt on the interior rows; the boundary rows (and the
        // normalization replacements) are algebraic in the stage unknowns.
        for q in 0..cells {
            let interior = q != 0 && q != cells - 1;
            for i in 0..n1 {
                let row = q * n1 + i;
                g[row] = if interior {
                    lambda[row] / record.dt
                } else {
                    0.0
                };
            }
        }
    }

    // Assemble per-entry gradients: each column pays Δt·s_e for every later
    // stage (the running film thickness), its own stage terms, and the final
    // thickness mismatch.
    let mut later_se = 0.0;
    let mut per_step = vec![0.0; steps];
    for m in (0..steps).rev() {
        per_step[m] = own_scalar[m] + dt * later_se + thickness_term;
        later_se += column_se[m];
    }
    let mut values = vec![0.0; n1 * steps];
    let mut active_bounds = 0usize;
    for i in 0..n1 {
        for m in 0..steps {
            values[i * steps + m] = per_step[m] + own_direct[i * steps + m];
            let c = ctrl.get(i, m);
            if c == 0.0 || c == prob.flux_bound {
                active_bounds += 1;
            }
        }
    }
    Ok(AdjointGradient {
        values,
        clipped_cells,
        active_bounds,
    })
}

/// Why the outer iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The cost fell to `eps_cost`.
    CostTolerance,
    /// The projected-gradient norm fell to `eps_gradient`.
    GradientTolerance,
    /// `max_outer` accepted iterations were reached.
    IterationCap,
    /// The line search stalled; reported inside [`OptimizerError::LineSearchFailure`].
    LineSearchStall,
}

/// Outcome of a minimization run.
#[derive(Debug, Clone)]
pub struct OptReport {
    /// Cost at the initial point and after each accepted iteration;
    /// nonincreasing by the line-search contract.
    pub history: Vec<f64>,
    /// Final (best) control.
    pub control: ControlVector,
    /// Projected-gradient norm at the final control.
    pub gradient_norm: f64,
    /// Projected-gradient norm at every iterate, aligned with `history`.
    pub gradient_norms: Vec<f64>,
    pub reason: StopReason,
    /// Accepted line-search step length per iteration.
    pub step_sizes: Vec<f64>,
    /// Clipping bookkeeping from the final gradient evaluation.
    pub clipped_cells: usize,
}

struct EngineOutcome {
    x: Vec<f64>,
    history: Vec<f64>,
    step_sizes: Vec<f64>,
    gradient_norm: f64,
    gradient_norms: Vec<f64>,
    reason: StopReason,
    clipped: usize,
}

enum EngineError {
    Propagated(OptimizerError),
    Stalled {
        iteration: usize,
        halvings: usize,
        outcome: EngineOutcome,
    },
}

impl From<OptimizerError> for EngineError {
    fn from(e: OptimizerError) -> Self {
        Self::Propagated(e)
    }
}

struct EngineOptions {
    eps_cost: f64,
    eps_gradient: f64,
    max_outer: usize,
    lower: f64,
    upper: f64,
}

const ARMIJO_SLOPE: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;
const CURVATURE_FLOOR: f64 = 1e-12;

fn clip(x: &[f64], lower: f64, upper: f64) -> Vec<f64> {
    x.iter().map(|v| v.clamp(lower, upper)).collect()
}

fn projected_gradient_norm(x: &[f64], grad: &[f64], lower: f64, upper: f64) -> f64 {
    x.iter()
        .zip(grad)
        .map(|(&xi, &gi)| {
            let moved = (xi - gi).clamp(lower, upper);
            let d = xi - moved;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Projected BFGS with Armijo backtracking on box constraints. `f` evaluates
/// the objective, `g` its gradient (plus a clipping counter). The inverse
/// Hessian approximation is dense; curvature pairs with tiny `sᵀy` are
/// skipped, and a failed search along the quasi-Newton direction falls back to
/// steepest descent before giving up.
fn minimize_box<F, G>(
    mut f: F,
    mut g: G,
    x0: Vec<f64>,
    opts: &EngineOptions,
) -> Result<EngineOutcome, EngineError>
where
    F: FnMut(&[f64]) -> Result<f64, OptimizerError>,
    G: FnMut(&[f64]) -> Result<(Vec<f64>, usize), OptimizerError>,
{
    let dim = x0.len();
    let mut x = clip(&x0, opts.lower, opts.upper);
    let mut cost = f(&x)?;
    let (mut grad, mut clipped) = g(&x)?;
    let mut history = vec![cost];
    let mut gradient_norms = vec![projected_gradient_norm(&x, &grad, opts.lower, opts.upper)];
    let mut step_sizes = Vec::new();
    let mut inverse_hessian: Option<DMatrix<f64>> = None;

    let outcome = |x: Vec<f64>,
                   history: Vec<f64>,
                   gradient_norms: Vec<f64>,
                   step_sizes: Vec<f64>,
                   grad: &[f64],
                   clipped: usize,
                   reason: StopReason| {
        let gradient_norm = projected_gradient_norm(&x, grad, opts.lower, opts.upper);
        EngineOutcome {
            x,
            history,
            step_sizes,
            gradient_norm,
            gradient_norms,
            reason,
            clipped,
        }
    };

    for iteration in 0..opts.max_outer {
        if cost <= opts.eps_cost {
            return Ok(outcome(
                x,
                history,
                gradient_norms,
                step_sizes,
                &grad,
                clipped,
                StopReason::CostTolerance,
            ));
        }
        if projected_gradient_norm(&x, &grad, opts.lower, opts.upper) <= opts.eps_gradient {
            return Ok(outcome(
                x,
                history,
                gradient_norms,
                step_sizes,
                &grad,
                clipped,
                StopReason::GradientTolerance,
            ));
        }

        let quasi_newton: Option<Vec<f64>> = inverse_hessian.as_ref().map(|h| {
            let d = h * DVector::from_column_slice(&grad);
            d.iter().map(|v| -v).collect()
        });
        let steepest: Vec<f64> = grad.iter().map(|v| -v).collect();

        let mut accepted: Option<(Vec<f64>, f64, f64)> = None;
        let mut exhausted_halvings = 0;
        let directions: Vec<&[f64]> = match &quasi_newton {
            Some(d) => vec![d.as_slice(), steepest.as_slice()],
            None => vec![steepest.as_slice()],
        };
        'search: for (which, direction) in directions.iter().enumerate() {
            let mut alpha = 1.0;
            for _ in 0..=MAX_HALVINGS {
                let candidate: Vec<f64> = x
                    .iter()
                    .zip(direction.iter())
                    .map(|(&xi, &di)| (xi + alpha * di).clamp(opts.lower, opts.upper))
                    .collect();
                let decrement: f64 = grad
                    .iter()
                    .zip(candidate.iter().zip(&x))
                    .map(|(&gi, (&ci, &xi))| gi * (ci - xi))
                    .sum();
                if decrement < 0.0 {
                    // A candidate the forward model cannot run (e.g. rates so
                    // large the stage solves diverge) is treated as +∞ and
                    // rejected; only the base-point evaluations are fatal.
                    if let Ok(trial) = f(&candidate) {
                        if trial <= cost + ARMIJO_SLOPE * decrement {
                            accepted = Some((candidate, trial, alpha));
                            break 'search;
                        }
                    }
                }
                alpha /= 2.0;
            }
            exhausted_halvings = MAX_HALVINGS;
            if which == 0 {
                // The quasi-Newton model misled the search; drop it and try
                // plain steepest descent before declaring failure.
                inverse_hessian = None;
            }
        }

        let Some((x_new, cost_new, alpha)) = accepted else {
            return Err(EngineError::Stalled {
                iteration,
                halvings: exhausted_halvings,
                outcome: outcome(
                    x,
                    history,
                    gradient_norms,
                    step_sizes,
                    &grad,
                    clipped,
                    StopReason::LineSearchStall,
                ),
            });
        };

        let (grad_new, clipped_new) = g(&x_new)?;
        let s = DVector::from_iterator(dim, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(dim, grad_new.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > CURVATURE_FLOOR * s.norm() * y.norm() {
            let h = inverse_hessian
                .take()
                .unwrap_or_else(|| DMatrix::identity(dim, dim) * (sy / y.dot(&y)));
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            let mut updated = h;
            // BFGS inverse update: (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ.
            updated -= rho * (&s * hy.transpose() + &hy * s.transpose());
            updated += (rho * rho * yhy + rho) * (&s * s.transpose());
            inverse_hessian = Some(updated);
        }

        x = x_new;
        cost = cost_new;
        grad = grad_new;
        clipped = clipped_new;
        history.push(cost);
        gradient_norms.push(projected_gradient_norm(&x, &grad, opts.lower, opts.upper));
        step_sizes.push(alpha);
    }

    Ok(outcome(
        x,
        history,
        gradient_norms,
        step_sizes,
        &grad,
        clipped,
        StopReason::IterationCap,
    ))
}

/// Minimize the target-matching cost starting from `ctrl0`, keeping every
/// iterate within `[0, flux_bound]` componentwise. Accepted iterates have
/// strictly decreasing cost; stopping follows the problem tolerances.
pub fn bfgs_minimize(
    prob: &OptProblem,
    ctrl0: &ControlVector,
) -> Result<OptReport, OptimizerError> {
    prob.check_control(ctrl0)?;
    let species = ctrl0.species();
    let steps = ctrl0.steps();
    let wrap = |x: &[f64]| ControlVector::from_flat(species, steps, x.to_vec());
    let opts = EngineOptions {
        eps_cost: prob.eps_cost,
        eps_gradient: prob.eps_gradient,
        max_outer: prob.max_outer,
        lower: 0.0,
        upper: prob.flux_bound,
    };
    let value = |x: &[f64]| cost(&wrap(x)?, prob);
    let gradient = |x: &[f64]| {
        let g = gradient_adjoint(&wrap(x)?, prob)?;
        Ok((g.values, g.clipped_cells))
    };
    let build = |outcome: EngineOutcome| -> Result<OptReport, OptimizerError> {
        Ok(OptReport {
            history: outcome.history,
            control: ControlVector::from_flat(species, steps, outcome.x)?,
            gradient_norm: outcome.gradient_norm,
            gradient_norms: outcome.gradient_norms,
            reason: outcome.reason,
            step_sizes: outcome.step_sizes,
            clipped_cells: outcome.clipped,
        })
    };
    match minimize_box(value, gradient, ctrl0.as_slice().to_vec(), &opts) {
        Ok(outcome) => build(outcome),
        Err(EngineError::Propagated(e)) => Err(e),
        Err(EngineError::Stalled {
            iteration,
            halvings,
            outcome,
        }) => Err(OptimizerError::LineSearchFailure {
            iteration,
            halvings,
            report: Box::new(build(outcome)?),
        }),
    }
}

/// Everything needed to pose a reconstruction exercise except the targets:
/// model coefficients, grid, horizon, initial data, bounds, tolerances, and
/// the constant level used as the starting guess.
#[derive(Debug, Clone)]
pub struct ExperimentSetup<'a> {
    pub table: &'a KMatrix,
    pub grid: Grid,
    pub initial: &'a Field,
    pub horizon: f64,
    pub steps: usize,
    pub e0: f64,
    pub flux_bound: f64,
    pub eps_cost: f64,
    pub eps_gradient: f64,
    pub max_outer: usize,
    pub newton: NewtonConfig,
    pub stencil: CrossDiffusionStencil,
    pub include_species_zero: bool,
    /// Constant level of the starting control.
    pub guess_level: f64,
}

impl<'a> ExperimentSetup<'a> {
    pub fn new(
        table: &'a KMatrix,
        grid: Grid,
        initial: &'a Field,
        horizon: f64,
        steps: usize,
        e0: f64,
    ) -> Self {
        Self {
            table,
            grid,
            initial,
            horizon,
            steps,
            e0,
            flux_bound: f64::INFINITY,
            eps_cost: 1e-5,
            eps_gradient: 1e-5,
            max_outer: 500,
            newton: NewtonConfig::default(),
            stencil: CrossDiffusionStencil::default(),
            include_species_zero: false,
            guess_level: 1.0,
        }
    }
}

/// Result of the generate-targets-then-recover workflow.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub report: OptReport,
    /// Targets produced by the generating schedule.
    pub target_profile: Field,
    pub target_thickness: f64,
    /// Final state of a fresh run at the recovered control.
    pub achieved_profile: Field,
    pub achieved_thickness: f64,
    /// Cost recomputed from that fresh run; bitwise-equal to the last history
    /// entry because the forward model is deterministic.
    pub recovered_cost: f64,
    /// Midpoint-rule L² distance between achieved and target profiles, per
    /// species (all of them, including species 0).
    pub species_l2: Vec<f64>,
    /// The generating rates, sampled on the control grid, for comparison.
    pub generator: ControlVector,
}

/// Three-stage workflow: simulate a generating schedule, adopt its final
/// profile and thickness as targets, minimize from a constant guess, and
/// re-simulate at the recovered control for comparison tables.
pub fn reconstruct_experiment(
    generating: &FluxSchedule,
    setup: &ExperimentSetup,
) -> Result<Reconstruction, OptimizerError> {
    let samples = generating.sample(setup.steps, setup.horizon)?;
    let generator = ControlVector::from_samples(&samples);
    let schedule = FluxSchedule::per_step(samples);
    let forward = Simulation {
        table: setup.table,
        grid: setup.grid,
        initial: setup.initial,
        schedule: &schedule,
        horizon: setup.horizon,
        steps: setup.steps,
        e0: setup.e0,
        newton: setup.newton,
        stencil: setup.stencil,
    };
    let generated = forward.run()?;
    let target_profile = generated.final_field().clone();
    let target_thickness = *generated
        .thickness
        .e
        .last()
        .expect("thickness history is nonempty");

    let mut prob = OptProblem::new(
        setup.table,
        setup.grid,
        setup.initial,
        setup.horizon,
        setup.steps,
        setup.e0,
        target_profile.clone(),
        target_thickness,
    )?;
    prob.flux_bound = setup.flux_bound;
    prob.eps_cost = setup.eps_cost;
    prob.eps_gradient = setup.eps_gradient;
    prob.max_outer = setup.max_outer;
    prob.newton = setup.newton;
    prob.stencil = setup.stencil;
    prob.include_species_zero = setup.include_species_zero;

    let ctrl0 = ControlVector::constant(
        setup.table.species().total(),
        setup.steps,
        setup.guess_level,
    );
    let report = bfgs_minimize(&prob, &ctrl0)?;

    let recovered_schedule = FluxSchedule::per_step(report.control.to_samples()?);
    let replay = prob.simulation(&recovered_schedule).run()?;
    let recovered_cost = prob.cost_from_trajectory(&replay);
    let achieved_profile = replay.final_field().clone();
    let achieved_thickness = *replay
        .thickness
        .e
        .last()
        .expect("thickness history is nonempty");
    let dy = setup.grid.dy();
    let species_l2 = (0..setup.table.species().total())
        .map(|i| {
            (0..setup.grid.cells())
                .map(|q| {
                    let d = achieved_profile.get(i, q) - target_profile.get(i, q);
                    d * d * dy
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    Ok(Reconstruction {
        report,
        target_profile,
        target_thickness,
        achieved_profile,
        achieved_thickness,
        recovered_cost,
        species_l2,
        generator,
    })
}
