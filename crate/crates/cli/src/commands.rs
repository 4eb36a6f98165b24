//! The five commands behind the `pvd` binary. Each takes a validated
//! configuration and an output directory, writes its files, and returns the
//! paths plus human-readable notes for the terminal.

use crate::config::{FluxSection, RunConfig, TargetSource};
use crate::csvio::{read_csv, write_csv, CsvTable, FloatFmt};
use crate::error::CliError;
use crate::plot::{render, Series};
use pvd_core::diagnostics::{
    decay_quantities, decay_series, entropy_series, weighted_entropy_monotone, DiagnosticsError,
};
use pvd_core::flux::FluxSchedule;
use pvd_core::lattice::{hydrodynamic_compare, CompareConfig, LatticeError};
use pvd_core::optimizer::{
    bfgs_minimize, reconstruct_experiment, ControlVector, ExperimentSetup, OptProblem, OptReport,
    OptimizerError, StopReason,
};
use pvd_core::solver::{Field, Grid, Simulation, SolverError, Trajectory};
use std::path::{Path, PathBuf};

/// Files written and notes to print (stdout, suppressed by `--quiet`).
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

fn solver_err(e: SolverError) -> CliError {
    CliError::Solver(e.to_string())
}

fn diagnostics_err(e: DiagnosticsError) -> CliError {
    match e {
        DiagnosticsError::DegenerateFit { .. } => CliError::Fit(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

fn optimizer_err(e: OptimizerError) -> CliError {
    match e {
        OptimizerError::Solver(inner) => CliError::Solver(inner.to_string()),
        OptimizerError::Flux(_)
        | OptimizerError::DimensionMismatch { .. }
        | OptimizerError::InfeasibleControl { .. }
        | OptimizerError::TargetThickness { .. }
        | OptimizerError::TargetOffSimplex { .. }
        | OptimizerError::TargetShape { .. } => CliError::Validation(e.to_string()),
        other => CliError::Optimizer(other.to_string()),
    }
}

fn lattice_err(e: LatticeError) -> CliError {
    match e {
        LatticeError::Solver(inner) => CliError::Solver(inner.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn build_simulation<'a>(
    cfg: &RunConfig,
    table: &'a pvd_core::model::KMatrix,
    grid: Grid,
    initial: &'a Field,
    schedule: &'a FluxSchedule,
) -> Simulation<'a> {
    Simulation {
        table,
        grid,
        initial,
        schedule,
        horizon: cfg.grid.t,
        steps: cfg.grid.m,
        e0: cfg.grid.e0,
        newton: cfg.newton(),
        stencil: cfg.stencil(),
    }
}

fn species_headers(prefix: &str, species: usize) -> Vec<String> {
    (0..species).map(|i| format!("{prefix}_{i}")).collect()
}

fn write_trajectory(
    path: &Path,
    traj: &Trajectory,
    grid: Grid,
    fmt: FloatFmt,
) -> Result<(), CliError> {
    let species = traj.final_field().species();
    let names = species_headers("species", species);
    let mut header = vec!["t", "y"];
    header.extend(names.iter().map(|s| s.as_str()));
    let rows = traj.times.iter().zip(&traj.fields).flat_map(|(&t, field)| {
        (0..grid.cells()).map(move |q| {
            let mut row = Vec::with_capacity(2 + species);
            row.push(fmt.fmt(t));
            row.push(fmt.fmt(grid.center(q)));
            row.extend((0..species).map(|i| fmt.fmt(field.get(i, q))));
            row
        })
    });
    write_csv(path, &header, rows)
}

fn write_thickness(path: &Path, traj: &Trajectory, fmt: FloatFmt) -> Result<(), CliError> {
    let track = &traj.thickness;
    let last_rate = track.ed.last().copied().unwrap_or(0.0);
    let rows = traj.times.iter().enumerate().map(|(m, &t)| {
        // The rate column holds the growth rate of the step starting at t;
        // the final row repeats the last step's rate.
        let rate = track.ed.get(m).copied().unwrap_or(last_rate);
        vec![fmt.fmt(t), fmt.fmt(track.e[m]), fmt.fmt(rate)]
    });
    write_csv(path, &["t", "e", "ed"], rows)
}

fn write_newton(path: &Path, traj: &Trajectory, fmt: FloatFmt) -> Result<(), CliError> {
    let rows = traj.newton.iter().enumerate().map(|(m, stats)| {
        vec![
            m.to_string(),
            stats.iterations.to_string(),
            fmt.fmt(stats.residual),
        ]
    });
    write_csv(path, &["step", "iters", "residual"], rows)
}

/// Forward run of the configured schedule; writes the trajectory, the
/// thickness track, and the Newton iteration log.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let grid = cfg.grid()?;
    let table = cfg.table()?;
    let initial = cfg.initial_field(grid)?;
    let schedule = cfg.fluxes.to_schedule()?;
    let traj = build_simulation(cfg, &table, grid, &initial, &schedule)
        .run()
        .map_err(solver_err)?;

    let fmt = FloatFmt::new(cfg.output.precision);
    let files = vec![
        out.join("trajectory.csv"),
        out.join("thickness.csv"),
        out.join("newton.csv"),
    ];
    write_trajectory(&files[0], &traj, grid, fmt)?;
    write_thickness(&files[1], &traj, fmt)?;
    write_newton(&files[2], &traj, fmt)?;
    let final_thickness = *traj.thickness.e.last().expect("nonempty track");
    Ok(CommandOutput {
        files,
        notes: vec![format!(
            "simulated {} steps on {} cells; final thickness {}",
            cfg.grid.m,
            cfg.grid.q,
            fmt.fmt(final_thickness)
        )],
    })
}

/// Long-horizon run under constant injection: decay observables and their
/// affine fits over the trailing half of the horizon.
pub fn cmd_longtime(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let FluxSection::Constant { levels } = &cfg.fluxes else {
        return Err(CliError::Validation(
            "longtime requires a constant flux schedule".into(),
        ));
    };
    if levels.iter().any(|&l| l <= 0.0) {
        return Err(CliError::Validation(
            "longtime requires strictly positive constant fluxes (the equilibrium \
             composition is their normalization)"
                .into(),
        ));
    }
    let grid = cfg.grid()?;
    let table = cfg.table()?;
    let initial = cfg.initial_field(grid)?;
    let schedule = cfg.fluxes.to_schedule()?;
    let traj = build_simulation(cfg, &table, grid, &initial, &schedule)
        .run()
        .map_err(solver_err)?;

    let total: f64 = levels.iter().sum();
    let fbar: Vec<f64> = levels.iter().map(|&l| l / total).collect();
    let series = decay_series(&traj, &fbar).map_err(diagnostics_err)?;
    let entropy = entropy_series(&traj, Some(&schedule));
    let weighted = entropy
        .weighted
        .as_ref()
        .expect("constant positive schedule has a weighted series");
    let monotone = weighted_entropy_monotone(&traj, &schedule).map_err(diagnostics_err)?;
    if !monotone.monotone {
        eprintln!(
            "warning: weighted relative entropy increased by {:e} at step {:?}",
            monotone.max_violation, monotone.worst_step
        );
    }

    let fmt = FloatFmt::new(cfg.output.precision);
    let species = cfg.species();
    let mut header = vec![
        "t".to_string(),
        "Ebar".to_string(),
        "weighted".to_string(),
        "gamma".to_string(),
        "eta".to_string(),
    ];
    header.extend(species_headers("eta", species));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let decay_path = out.join("decay.csv");
    let rows = (0..series.t.len()).map(|m| {
        let mut row = vec![
            fmt.fmt(series.t[m]),
            fmt.fmt(series.relative_entropy[m]),
            fmt.fmt(weighted[m]),
            fmt.fmt_opt(series.gamma[m]),
            fmt.fmt_opt(series.eta_total[m]),
        ];
        row.extend((0..species).map(|i| fmt.fmt_opt(series.eta[i][m])));
        row
    });
    write_csv(&decay_path, &header_refs, rows)?;

    // The decay series is useful even when the fits cannot be made (e.g. a
    // stationary run), so it is written before fitting.
    let report = decay_quantities(&traj, &fbar).map_err(diagnostics_err)?;
    let fit_path = out.join("decayfit.csv");
    let mut fit_rows = vec![("gamma".to_string(), report.gamma)];
    fit_rows.push(("eta".to_string(), report.eta_total));
    for (i, fit) in report.eta.iter().enumerate() {
        fit_rows.push((format!("eta_{i}"), *fit));
    }
    write_csv(
        &fit_path,
        &["quantity", "slope", "intercept", "r2"],
        fit_rows.into_iter().map(|(name, fit)| {
            vec![
                name,
                fmt.fmt(fit.slope),
                fmt.fmt(fit.intercept),
                fmt.fmt(fit.r2),
            ]
        }),
    )?;

    Ok(CommandOutput {
        files: vec![decay_path, fit_path],
        notes: vec![
            format!(
                "fit window [{}, {}]; gamma slope {} (r2 {})",
                fmt.fmt(report.window.0),
                fmt.fmt(report.window.1),
                fmt.fmt(report.gamma.slope),
                fmt.fmt(report.gamma.r2)
            ),
            format!(
                "weighted relative entropy {}",
                if monotone.monotone {
                    "nonincreasing".to_string()
                } else {
                    format!("INCREASED (max violation {:e})", monotone.max_violation)
                }
            ),
        ],
    })
}

fn reason_str(reason: StopReason) -> &'static str {
    match reason {
        StopReason::CostTolerance => "cost-tolerance",
        StopReason::GradientTolerance => "gradient-tolerance",
        StopReason::IterationCap => "iteration-cap",
        StopReason::LineSearchStall => "line-search-stall",
    }
}

struct OptOutputs<'a> {
    report: &'a OptReport,
    generator: Option<&'a ControlVector>,
    target: &'a Field,
    target_thickness: f64,
    achieved: Option<(&'a Field, f64)>,
    species_l2: Option<Vec<f64>>,
}

fn write_opt_outputs(
    out: &Path,
    fmt: FloatFmt,
    grid: Grid,
    dt: f64,
    o: &OptOutputs,
) -> Result<Vec<PathBuf>, CliError> {
    let report = o.report;
    let mut files = Vec::new();

    let history_path = out.join("opt_history.csv");
    let rows = (0..report.history.len()).map(|m| {
        vec![
            m.to_string(),
            fmt.fmt(report.history[m]),
            fmt.fmt(report.gradient_norms[m]),
            fmt.fmt(if m == 0 { 0.0 } else { report.step_sizes[m - 1] }),
        ]
    });
    write_csv(
        &history_path,
        &["iteration", "J", "gradient_norm", "step_size"],
        rows,
    )?;
    files.push(history_path);

    let control = &report.control;
    let species = control.species();
    let control_path = out.join("opt_control.csv");
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(species_headers("phi", species));
    if o.generator.is_some() {
        header.extend(species_headers("gen", species));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = (0..control.steps()).map(|m| {
        let mut row = Vec::with_capacity(header_refs.len());
        row.push(fmt.fmt(m as f64 * dt));
        row.extend((0..species).map(|i| fmt.fmt(control.get(i, m))));
        if let Some(generator) = o.generator {
            row.extend((0..species).map(|i| fmt.fmt(generator.get(i, m))));
        }
        row
    });
    write_csv(&control_path, &header_refs, rows)?;
    files.push(control_path);

    if let Some((achieved, _)) = o.achieved {
        let compare_path = out.join("final_compare.csv");
        let mut header: Vec<String> = vec!["y".into()];
        header.extend(species_headers("target", species));
        header.extend(species_headers("achieved", species));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows = (0..grid.cells()).map(|q| {
            let mut row = Vec::with_capacity(header_refs.len());
            row.push(fmt.fmt(grid.center(q)));
            row.extend((0..species).map(|i| fmt.fmt(o.target.get(i, q))));
            row.extend((0..species).map(|i| fmt.fmt(achieved.get(i, q))));
            row
        });
        write_csv(&compare_path, &header_refs, rows)?;
        files.push(compare_path);
    }

    let summary_path = out.join("summary.txt");
    let mut text = String::new();
    text.push_str(&format!("stop_reason: {}\n", reason_str(report.reason)));
    text.push_str(&format!("iterations: {}\n", report.history.len() - 1));
    text.push_str(&format!(
        "final_cost: {}\n",
        fmt.fmt(*report.history.last().expect("nonempty history"))
    ));
    text.push_str(&format!(
        "gradient_norm: {}\n",
        fmt.fmt(report.gradient_norm)
    ));
    text.push_str(&format!(
        "target_thickness: {}\n",
        fmt.fmt(o.target_thickness)
    ));
    if let Some((_, achieved_thickness)) = o.achieved {
        text.push_str(&format!(
            "achieved_thickness: {}\n",
            fmt.fmt(achieved_thickness)
        ));
        text.push_str(&format!(
            "thickness_gap: {}\n",
            fmt.fmt((achieved_thickness - o.target_thickness).abs())
        ));
    }
    if let Some(l2) = &o.species_l2 {
        let joined: Vec<String> = l2.iter().map(|&v| fmt.fmt(v)).collect();
        text.push_str(&format!("species_l2: {}\n", joined.join(" ")));
    }
    text.push_str(&format!("clipped_cells: {}\n", report.clipped_cells));
    std::fs::write(&summary_path, text)?;
    files.push(summary_path);
    Ok(files)
}

fn profile_l2(a: &Field, b: &Field, dy: f64) -> Vec<f64> {
    (0..a.species())
        .map(|i| {
            let sum: f64 = (0..a.cells())
                .map(|q| {
                    let d = a.get(i, q) - b.get(i, q);
                    d * d
                })
                .sum();
            (sum * dy).sqrt()
        })
        .collect()
}

fn read_target_profile(path: &Path, grid: Grid, species: usize) -> Result<Field, CliError> {
    let table = read_csv(path)?;
    if table.columns.len() != species + 1 || table.columns[0] != "y" {
        return Err(CliError::Parse(format!(
            "{}: target profile needs columns y,species_0..species_{}",
            path.display(),
            species - 1
        )));
    }
    if table.rows.len() != grid.cells() {
        return Err(CliError::Validation(format!(
            "target profile has {} rows for {} grid cells",
            table.rows.len(),
            grid.cells()
        )));
    }
    let mut field = Field::zeros(species, grid.cells());
    for (q, row) in table.rows.iter().enumerate() {
        for i in 0..species {
            let value = row[i + 1].ok_or_else(|| {
                CliError::Parse(format!("target profile row {} has an empty cell", q + 1))
            })?;
            field.set(i, q, value);
        }
    }
    Ok(field)
}

/// Flux reconstruction: targets either from an embedded generating run of
/// the configured schedule or from a profile file, minimized by projected
/// BFGS. On a line-search stall the best iterate's outputs are still
/// written before the failure is reported.
pub fn cmd_optimize(cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let opt = cfg
        .optimize
        .as_ref()
        .ok_or_else(|| CliError::Validation("missing [optimize] section".into()))?;
    let grid = cfg.grid()?;
    let table = cfg.table()?;
    let initial = cfg.initial_field(grid)?;
    let fmt = FloatFmt::new(cfg.output.precision);
    let dt = cfg.dt();

    let apply = |setup: &mut ExperimentSetup| {
        setup.flux_bound = opt.f;
        setup.eps_cost = opt.eps_j;
        setup.eps_gradient = opt.nu_grad;
        setup.max_outer = opt.max_outer;
        setup.newton = cfg.newton();
        setup.stencil = cfg.stencil();
        setup.include_species_zero = opt.include_species_zero;
        setup.guess_level = opt.guess;
    };

    match &opt.targets {
        TargetSource::Generate => {
            let generating = cfg.fluxes.to_schedule()?;
            let mut setup =
                ExperimentSetup::new(&table, grid, &initial, cfg.grid.t, cfg.grid.m, cfg.grid.e0);
            apply(&mut setup);
            match reconstruct_experiment(&generating, &setup) {
                Ok(rec) => {
                    let outputs = OptOutputs {
                        report: &rec.report,
                        generator: Some(&rec.generator),
                        target: &rec.target_profile,
                        target_thickness: rec.target_thickness,
                        achieved: Some((&rec.achieved_profile, rec.achieved_thickness)),
                        species_l2: Some(rec.species_l2.clone()),
                    };
                    let files = write_opt_outputs(out, fmt, grid, dt, &outputs)?;
                    Ok(CommandOutput {
                        files,
                        notes: vec![format!(
                            "stopped by {} after {} iterations; thickness gap {}",
                            reason_str(rec.report.reason),
                            rec.report.history.len() - 1,
                            fmt.fmt((rec.achieved_thickness - rec.target_thickness).abs())
                        )],
                    })
                }
                Err(OptimizerError::LineSearchFailure {
                    iteration,
                    halvings,
                    report,
                }) => {
                    // Recover the targets from a fresh generating run so the
                    // best iterate can still be written out.
                    let generated = build_simulation(cfg, &table, grid, &initial, &generating)
                        .run()
                        .map_err(solver_err)?;
                    let target = generated.final_field().clone();
                    let target_thickness = *generated.thickness.e.last().expect("nonempty");
                    persist_stall(
                        out, fmt, grid, dt, *report, &target, target_thickness, &table, cfg,
                        iteration, halvings,
                    )
                }
                Err(e) => Err(optimizer_err(e)),
            }
        }
        TargetSource::File { profile, thickness } => {
            let species = cfg.species();
            let target = read_target_profile(Path::new(profile), grid, species)?;
            let mut prob = OptProblem::new(
                &table,
                grid,
                &initial,
                cfg.grid.t,
                cfg.grid.m,
                cfg.grid.e0,
                target.clone(),
                *thickness,
            )
            .map_err(optimizer_err)?;
            prob.flux_bound = opt.f;
            prob.eps_cost = opt.eps_j;
            prob.eps_gradient = opt.nu_grad;
            prob.max_outer = opt.max_outer;
            prob.newton = cfg.newton();
            prob.stencil = cfg.stencil();
            prob.include_species_zero = opt.include_species_zero;
            let ctrl0 = ControlVector::constant(species, cfg.grid.m, opt.guess);
            match bfgs_minimize(&prob, &ctrl0) {
                Ok(report) => {
                    let samples = report.control.to_samples().map_err(optimizer_err)?;
                    let schedule = FluxSchedule::per_step(samples);
                    let replay = build_simulation(cfg, &table, grid, &initial, &schedule)
                        .run()
                        .map_err(solver_err)?;
                    let achieved = replay.final_field().clone();
                    let achieved_thickness = *replay.thickness.e.last().expect("nonempty");
                    let outputs = OptOutputs {
                        report: &report,
                        generator: None,
                        target: &target,
                        target_thickness: *thickness,
                        achieved: Some((&achieved, achieved_thickness)),
                        species_l2: Some(profile_l2(&achieved, &target, grid.dy())),
                    };
                    let files = write_opt_outputs(out, fmt, grid, dt, &outputs)?;
                    Ok(CommandOutput {
                        files,
                        notes: vec![format!(
                            "stopped by {} after {} iterations; thickness gap {}",
                            reason_str(report.reason),
                            report.history.len() - 1,
                            fmt.fmt((achieved_thickness - thickness).abs())
                        )],
                    })
                }
                Err(OptimizerError::LineSearchFailure {
                    iteration,
                    halvings,
                    report,
                }) => persist_stall(
                    out, fmt, grid, dt, *report, &target, *thickness, &table, cfg, iteration,
                    halvings,
                ),
                Err(e) => Err(optimizer_err(e)),
            }
        }
    }
}

/// Writes the best-iterate outputs after a line-search stall, then reports
/// the stall as the command failure.
#[allow(clippy::too_many_arguments)]
fn persist_stall(
    out: &Path,
    fmt: FloatFmt,
    grid: Grid,
    dt: f64,
    report: OptReport,
    target: &Field,
    target_thickness: f64,
    table: &pvd_core::model::KMatrix,
    cfg: &RunConfig,
    iteration: usize,
    halvings: usize,
) -> Result<CommandOutput, CliError> {
    // Replay the best control for the comparison table; if even that fails,
    // fall back to history and control only.
    let initial = cfg.initial_field(grid)?;
    let replayed = report.control.to_samples().ok().and_then(|samples| {
        let schedule = FluxSchedule::per_step(samples);
        build_simulation(cfg, table, grid, &initial, &schedule).run().ok()
    });
    let achieved = replayed.as_ref().map(|traj| {
        (
            traj.final_field().clone(),
            *traj.thickness.e.last().expect("nonempty"),
        )
    });
    let outputs = OptOutputs {
        report: &report,
        generator: None,
        target,
        target_thickness,
        achieved: achieved.as_ref().map(|(f, e)| (f, *e)),
        species_l2: achieved
            .as_ref()
            .map(|(f, _)| profile_l2(f, target, grid.dy())),
    };
    write_opt_outputs(out, fmt, grid, dt, &outputs)?;
    Err(CliError::Optimizer(format!(
        "line search stalled at iteration {iteration} after {halvings} halvings; \
         best iterate written to {}",
        out.display()
    )))
}

/// Ensemble of exchange lattices against the matched macroscopic run;
/// writes both coarse densities and their per-species L¹ distances.
pub fn cmd_lattice_compare(
    cfg: &RunConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<CommandOutput, CliError> {
    let lat = cfg
        .lattice
        .as_ref()
        .ok_or_else(|| CliError::Validation("missing [lattice] section".into()))?;
    if !cfg.fluxes.is_zero() {
        return Err(CliError::Validation(
            "lattice-compare requires a zero flux schedule".into(),
        ));
    }
    if cfg.grid.e0 != 1.0 {
        return Err(CliError::Validation(
            "lattice-compare runs on the static unit domain; set grid.e0 = 1".into(),
        ));
    }
    let species = cfg.species();
    let probabilities = lat.probabilities(species)?;
    let closures = cfg.profile_closures();
    let refs: Vec<&dyn Fn(f64) -> f64> = closures
        .iter()
        .map(|b| b.as_ref() as &dyn Fn(f64) -> f64)
        .collect();
    let seed = seed_override.unwrap_or(lat.seed);
    let compare = CompareConfig {
        probabilities: &probabilities,
        diffusion_constant: lat.diffusion,
        sites: lat.sites,
        capacity: lat.capacity,
        ensemble: lat.ensemble,
        horizon: cfg.grid.t,
        initial: &refs,
        pde_cells: cfg.grid.q,
        pde_steps: cfg.grid.m,
        newton: cfg.newton(),
        stencil: cfg.stencil(),
        seed,
    };
    let report = hydrodynamic_compare(&compare).map_err(lattice_err)?;

    let fmt = FloatFmt::new(cfg.output.precision);
    let names = species_headers("species", species);
    let mut header = vec!["y".to_string()];
    header.extend(names);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let density_rows = |field: &Field| {
        (0..report.bins)
            .map(|b| {
                let mut row = Vec::with_capacity(species + 1);
                row.push(fmt.fmt((b as f64 + 0.5) / report.bins as f64));
                row.extend((0..species).map(|i| fmt.fmt(field.get(i, b))));
                row
            })
            .collect::<Vec<_>>()
    };
    let lattice_path = out.join("lattice_density.csv");
    let pde_path = out.join("pde_density.csv");
    let distance_path = out.join("l1_distance.csv");
    write_csv(&lattice_path, &header_refs, density_rows(&report.lattice_density))?;
    write_csv(&pde_path, &header_refs, density_rows(&report.pde_density))?;
    write_csv(
        &distance_path,
        &["species", "l1_distance", "seed"],
        report
            .distances
            .iter()
            .enumerate()
            .map(|(i, &d)| vec![i.to_string(), fmt.fmt(d), seed.to_string()]),
    )?;

    Ok(CommandOutput {
        files: vec![lattice_path, pde_path, distance_path],
        notes: vec![format!(
            "{} members, {} sweeps on {} bins; max L1 distance {}",
            lat.ensemble,
            report.sweeps,
            report.bins,
            fmt.fmt(report.distances.iter().copied().fold(0.0, f64::max))
        )],
    })
}

/// Figure kinds understood by `pvd plot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Per-species composition profiles over y (final block of a trajectory,
    /// or any `y`-first table such as the density CSVs).
    Profiles,
    /// Injection rates over time (`opt_control.csv` or any `t`-first table).
    Fluxes,
    /// Reciprocal decay observables γ and η over time (`decay.csv`).
    Decay,
    /// Cost history on a log scale (`opt_history.csv`).
    Convergence,
    /// Target versus achieved profiles (`final_compare.csv`).
    Compare,
}

fn series_from_columns(
    table: &CsvTable,
    x: usize,
    columns: impl Iterator<Item = usize>,
    dashed: impl Fn(&str) -> bool,
) -> Vec<Series> {
    columns
        .map(|c| Series {
            label: table.columns[c].clone(),
            points: table.series(x, c),
            dashed: dashed(&table.columns[c]),
        })
        .collect()
}

/// Renders a CSV produced by the compute commands as a static SVG. The
/// output lands next to nothing else: `<input stem>.svg` inside `out`.
pub fn cmd_plot(input: &Path, kind: PlotKind, out: &Path) -> Result<CommandOutput, CliError> {
    let table = read_csv(input)?;
    if table.rows.is_empty() {
        return Err(CliError::Parse(format!(
            "{}: no data rows",
            input.display()
        )));
    }
    let solid = |_: &str| false;
    let (title, x_label, y_label, series) = match kind {
        PlotKind::Profiles => {
            let (x, first_series) = if table.columns.first().map(String::as_str) == Some("t")
                && table.columns.get(1).map(String::as_str) == Some("y")
            {
                (1, 2)
            } else if table.columns.first().map(String::as_str) == Some("y") {
                (0, 1)
            } else {
                return Err(CliError::Parse(
                    "profiles plot expects (y, …) or (t, y, …) columns".into(),
                ));
            };
            let mut table = table;
            if x == 1 {
                // Trajectory input: keep only the final time block.
                let t_max = table
                    .rows
                    .iter()
                    .filter_map(|r| r[0])
                    .fold(f64::NEG_INFINITY, f64::max);
                table.rows.retain(|r| r[0] == Some(t_max));
            }
            let count = table.columns.len();
            let series = series_from_columns(&table, x, first_series..count, solid);
            ("composition profiles", "y", "fraction", series)
        }
        PlotKind::Fluxes => {
            if table.columns.first().map(String::as_str) != Some("t") {
                return Err(CliError::Parse("fluxes plot expects a leading t column".into()));
            }
            let count = table.columns.len();
            let series = series_from_columns(&table, 0, 1..count, |name| name.starts_with("gen"));
            ("injection rates", "t", "rate", series)
        }
        PlotKind::Decay => {
            let t = table.column("t")?;
            let gamma = table.column("gamma")?;
            let eta = table.column("eta")?;
            let series = series_from_columns(&table, t, [gamma, eta].into_iter(), solid);
            ("reciprocal decay observables", "t", "1 / gap", series)
        }
        PlotKind::Convergence => {
            let iter = table.column("iteration")?;
            let cost = table.column("J")?;
            let points: Vec<(f64, f64)> = table
                .series(iter, cost)
                .into_iter()
                .filter(|&(_, j)| j > 0.0)
                .map(|(i, j)| (i, j.log10()))
                .collect();
            let series = vec![Series {
                label: "log10(J)".into(),
                points,
                dashed: false,
            }];
            ("cost convergence", "iteration", "log10(J)", series)
        }
        PlotKind::Compare => {
            if table.columns.first().map(String::as_str) != Some("y") {
                return Err(CliError::Parse("compare plot expects a leading y column".into()));
            }
            let count = table.columns.len();
            let series =
                series_from_columns(&table, 0, 1..count, |name| name.starts_with("target"));
            ("target versus achieved", "y", "fraction", series)
        }
    };
    let svg = render(title, x_label, y_label, &series)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("plot");
    let path = out.join(format!("{stem}.svg"));
    std::fs::write(&path, svg)?;
    Ok(CommandOutput {
        files: vec![path],
        notes: vec![format!("{} series rendered", series_count(kind))],
    })
}

fn series_count(kind: PlotKind) -> &'static str {
    match kind {
        PlotKind::Profiles => "profile",
        PlotKind::Fluxes => "flux",
        PlotKind::Decay => "decay",
        PlotKind::Convergence => "convergence",
        PlotKind::Compare => "comparison",
    }
}
