//! Run configuration: a TOML schema covering the model coefficients, the
//! space-time grid, the injection schedule, named initial profiles, Newton
//! settings, and the optional optimizer and lattice sections.
//!
//! `Δt = T/M` and `Δy = 1/Q` are always derived from the grid section; they
//! can never be specified independently. Configs round-trip: parsing the
//! emitted form yields an equal value.

use crate::error::CliError;
use pvd_core::flux::{FluxSchedule, PiecewiseSpecies};
use pvd_core::lattice::ExchangeProbabilities;
use pvd_core::model::KMatrix;
use pvd_core::solver::{discretize_initial, CrossDiffusionStencil, Field, Grid, NewtonConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub fluxes: FluxSection,
    pub initial: Vec<ProfileSpec>,
    #[serde(default)]
    pub newton: NewtonSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Independent species; the mixture has `n + 1`.
    pub n: usize,
    /// Full `(n+1)²` symmetric coefficient table. Optional only for
    /// `lattice-compare`, which derives its table from the lattice section.
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub stencil: StencilChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StencilChoice {
    /// Mixed second differences with consistent 1/Δy² weights (default).
    #[default]
    Consistent,
    /// Literal halved cross-center variant, kept for comparison runs.
    HalvedCrossCenter,
}

impl From<StencilChoice> for CrossDiffusionStencil {
    fn from(choice: StencilChoice) -> Self {
        match choice {
            StencilChoice::Consistent => CrossDiffusionStencil::Consistent,
            StencilChoice::HalvedCrossCenter => CrossDiffusionStencil::HalvedCrossCenter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Space cells; `Δy = 1/Q`.
    #[serde(rename = "Q")]
    pub q: usize,
    /// Time steps; `Δt = T/M`.
    #[serde(rename = "M")]
    pub m: usize,
    /// Horizon.
    #[serde(rename = "T")]
    pub t: f64,
    /// Initial film thickness.
    pub e0: f64,
}

/// Injection schedule. Levels are per species, outermost index `0..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FluxSection {
    Constant {
        levels: Vec<f64>,
    },
    /// Three levels per species switching at the two shared breakpoints.
    Piecewise {
        breakpoints: [f64; 2],
        levels: Vec<[f64; 3]>,
    },
}

impl FluxSection {
    pub fn species(&self) -> usize {
        match self {
            Self::Constant { levels } => levels.len(),
            Self::Piecewise { levels, .. } => levels.len(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant { levels } => levels.iter().all(|&l| l == 0.0),
            Self::Piecewise { levels, .. } => {
                levels.iter().all(|l| l.iter().all(|&x| x == 0.0))
            }
        }
    }

    pub fn to_schedule(&self) -> Result<FluxSchedule, CliError> {
        let schedule = match self {
            Self::Constant { levels } => FluxSchedule::constant(levels.clone()),
            Self::Piecewise {
                breakpoints,
                levels,
            } => FluxSchedule::piecewise(
                levels
                    .iter()
                    .map(|l| PiecewiseSpecies {
                        tau1: breakpoints[0],
                        tau2: breakpoints[1],
                        levels: *l,
                    })
                    .collect(),
            ),
        };
        schedule.map_err(|e| CliError::Validation(format!("fluxes: {e}")))
    }
}

/// Closed catalog of initial composition profiles; the per-species weights
/// are normalized cellwise into fractions when the field is discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileSpec {
    /// `c_0 + c_1·y + c_2·y² + …`
    Polynomial { coeffs: Vec<f64> },
    /// `offset + scale·√y`
    Sqrt {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + scale·exp(−(y−center)²/width)`
    Gaussian {
        center: f64,
        width: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + scale·|sin(πy)|`
    AbsSine {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    Constant { value: f64 },
    Zero,
}

fn one() -> f64 {
    1.0
}

impl ProfileSpec {
    pub fn evaluate(&self, y: f64) -> f64 {
        match self {
            Self::Polynomial { coeffs } => coeffs
                .iter()
                .rev()
                .fold(0.0, |acc, &c| acc * y + c),
            Self::Sqrt { scale, offset } => offset + scale * y.sqrt(),
            Self::Gaussian {
                center,
                width,
                scale,
                offset,
            } => {
                let d = y - center;
                offset + scale * (-d * d / width).exp()
            }
            Self::AbsSine { scale, offset } => {
                offset + scale * (std::f64::consts::PI * y).sin().abs()
            }
            Self::Constant { value } => *value,
            Self::Zero => 0.0,
        }
    }

    fn validate(&self, index: usize) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Validation(msg));
        match self {
            Self::Polynomial { coeffs } if coeffs.is_empty() => {
                fail(format!("initial[{index}]: polynomial needs coefficients"))
            }
            Self::Gaussian { width, .. } if !(width.is_finite() && *width > 0.0) => {
                fail(format!("initial[{index}]: gaussian width must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    50
}

impl Default for NewtonSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

/// Where the optimizer gets its targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetSource {
    /// Simulate the `[fluxes]` schedule and adopt its final profile and
    /// thickness as targets.
    Generate,
    /// Read the target profile from a CSV (`y,species_0..`) and the target
    /// thickness from the given value.
    File { profile: String, thickness: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub targets: TargetSource,
    /// Componentwise upper bound on the rates (`inf` disables it).
    #[serde(rename = "F", default = "default_flux_bound")]
    pub f: f64,
    /// Stop when the cost falls below this.
    #[serde(rename = "eps_J", default = "default_eps")]
    pub eps_j: f64,
    /// Stop when the projected-gradient norm falls below this.
    #[serde(default = "default_eps")]
    pub nu_grad: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    /// Constant level of the starting control.
    #[serde(default = "one")]
    pub guess: f64,
    /// Whether species 0 participates in the profile mismatch.
    #[serde(default)]
    pub include_species_zero: bool,
}

fn default_flux_bound() -> f64 {
    f64::INFINITY
}

fn default_eps() -> f64 {
    1e-5
}

fn default_max_outer() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    /// Total sites; grouped into `sites/capacity` intervals.
    pub sites: usize,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Independent realizations averaged on the lattice side.
    pub ensemble: usize,
    /// Diffusion scale `a`; coefficients are `K = a·p`.
    pub diffusion: f64,
    /// Uniform off-diagonal swap probability…
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// …or a full per-pair table (exactly one of the two).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_capacity() -> usize {
    50
}

impl LatticeSection {
    pub fn probabilities(&self, species: usize) -> Result<ExchangeProbabilities, CliError> {
        let built = match (&self.probability, &self.table) {
            (Some(p), None) => ExchangeProbabilities::uniform(species, *p),
            (None, Some(rows)) => {
                if rows.len() != species {
                    return Err(CliError::Validation(format!(
                        "lattice.table has {} rows, model has {species} species",
                        rows.len()
                    )));
                }
                ExchangeProbabilities::from_rows(rows)
            }
            _ => {
                return Err(CliError::Validation(
                    "lattice: set exactly one of `probability` or `table`".into(),
                ))
            }
        };
        built.map_err(|e| CliError::Validation(format!("lattice: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    /// Significant digits in data files; 17 keeps the shortest
    /// round-trippable form.
    #[serde(default = "default_precision")]
    pub precision: usize,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_precision() -> usize {
    17
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            precision: default_precision(),
        }
    }
}

impl RunConfig {
    /// Species in the mixture, `n + 1`.
    pub fn species(&self) -> usize {
        self.model.n + 1
    }

    pub fn dt(&self) -> f64 {
        self.grid.t / self.grid.m as f64
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        Grid::new(self.grid.q).map_err(|e| CliError::Validation(format!("grid: {e}")))
    }

    /// The coefficient table; errors when `[model] K` is absent.
    pub fn table(&self) -> Result<KMatrix, CliError> {
        let rows = self.model.k.as_ref().ok_or_else(|| {
            CliError::Validation("model.K is required for this command".into())
        })?;
        KMatrix::from_rows(rows).map_err(|e| CliError::Validation(format!("model.K: {e}")))
    }

    pub fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            residual_tol: self.newton.tol,
            max_iter: self.newton.max_iter,
        }
    }

    pub fn stencil(&self) -> CrossDiffusionStencil {
        self.model.stencil.into()
    }

    /// Per-species weight closures from the profile catalog.
    pub fn profile_closures(&self) -> Vec<Box<dyn Fn(f64) -> f64>> {
        self.initial
            .iter()
            .map(|spec| {
                let spec = spec.clone();
                Box::new(move |y| spec.evaluate(y)) as Box<dyn Fn(f64) -> f64>
            })
            .collect()
    }

    /// Normalized initial fractions on the grid.
    pub fn initial_field(&self, grid: Grid) -> Result<Field, CliError> {
        let closures = self.profile_closures();
        let refs: Vec<&dyn Fn(f64) -> f64> = closures
            .iter()
            .map(|b| b.as_ref() as &dyn Fn(f64) -> f64)
            .collect();
        discretize_initial(&refs, grid)
            .map_err(|e| CliError::Validation(format!("initial profiles: {e}")))
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Validation(msg));
        let species = self.species();
        if self.model.n == 0 {
            return fail("model.n must be at least 1".into());
        }
        if self.grid.q < 3 {
            return fail(format!("grid.Q = {} is too small (need ≥ 3)", self.grid.q));
        }
        if self.grid.m == 0 {
            return fail("grid.M must be positive".into());
        }
        if !(self.grid.t.is_finite() && self.grid.t > 0.0) {
            return fail(format!("grid.T = {} must be positive", self.grid.t));
        }
        if !(self.grid.e0.is_finite() && self.grid.e0 > 0.0) {
            return fail(format!("grid.e0 = {} must be positive", self.grid.e0));
        }

        if let Some(rows) = &self.model.k {
            if rows.len() != species || rows.iter().any(|r| r.len() != species) {
                return fail(format!(
                    "model.K must be a {species}×{species} table for n = {}",
                    self.model.n
                ));
            }
            for i in 0..species {
                for j in (i + 1)..species {
                    if (rows[i][j] - rows[j][i]).abs() > 1e-12 {
                        return fail(format!(
                            "K must be symmetric (K[{i}][{j}] = {} vs K[{j}][{i}] = {})",
                            rows[i][j], rows[j][i]
                        ));
                    }
                }
            }
            KMatrix::from_rows(rows)
                .map_err(|e| CliError::Validation(format!("model.K: {e}")))?;
        }

        if self.initial.len() != species {
            return fail(format!(
                "{} initial profiles for {species} species",
                self.initial.len()
            ));
        }
        for (i, spec) in self.initial.iter().enumerate() {
            spec.validate(i)?;
        }

        if self.fluxes.species() != species {
            return fail(format!(
                "fluxes define {} species, model has {species}",
                self.fluxes.species()
            ));
        }
        if let FluxSection::Piecewise { breakpoints, .. } = &self.fluxes {
            if !(0.0 < breakpoints[0]
                && breakpoints[0] < breakpoints[1]
                && breakpoints[1] < self.grid.t)
            {
                return fail(format!(
                    "flux breakpoints {:?} must satisfy 0 < τ1 < τ2 < T = {}",
                    breakpoints, self.grid.t
                ));
            }
        }
        self.fluxes.to_schedule()?;

        if !(self.newton.tol.is_finite() && self.newton.tol > 0.0) || self.newton.max_iter == 0 {
            return fail("newton.tol must be positive and newton.max_iter nonzero".into());
        }

        if let Some(opt) = &self.optimize {
            if !(opt.eps_j > 0.0 && opt.nu_grad > 0.0) {
                return fail("optimize tolerances must be positive".into());
            }
            if opt.max_outer == 0 {
                return fail("optimize.max_outer must be positive".into());
            }
            if !(opt.guess.is_finite() && opt.guess >= 0.0) {
                return fail(format!("optimize.guess = {} must be nonnegative", opt.guess));
            }
            if opt.f.is_nan() || opt.f <= 0.0 {
                return fail(format!("optimize.F = {} must be positive", opt.f));
            }
            if let TargetSource::File { thickness, .. } = &opt.targets {
                if !(thickness.is_finite() && *thickness > self.grid.e0) {
                    return fail(format!(
                        "optimize target thickness {thickness} must exceed e0 = {}",
                        self.grid.e0
                    ));
                }
            }
        }

        if let Some(lat) = &self.lattice {
            if lat.sites == 0 || lat.ensemble == 0 || lat.capacity == 0 {
                return fail("lattice sites, capacity, and ensemble must be positive".into());
            }
            if !(lat.diffusion.is_finite() && lat.diffusion > 0.0) {
                return fail(format!(
                    "lattice.diffusion = {} must be positive",
                    lat.diffusion
                ));
            }
            lat.probabilities(species)?;
        }

        if self.output.precision == 0 || self.output.precision > 17 {
            return fail(format!(
                "output.precision = {} must be between 1 and 17",
                self.output.precision
            ));
        }
        Ok(())
    }
}

/// Reads, parses, and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// As [`parse_config`], from an in-memory string.
pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes a configuration; the result parses back to an equal value.
pub fn emit_config(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("configuration serializes")
}
