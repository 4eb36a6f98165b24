//! Algebraic core of the cross-diffusion model.
//!
//! A mixture of `n + 1` species is described by the volume fractions of
//! species `1..=n`; species `0` is eliminated through `u_0 = 1 - ρ_u` with
//! `ρ_u = Σ u_i`. Valid states live in the closed simplex
//! `D̄ = {u ∈ R₊ⁿ : ρ_u ≤ 1}`, and several quantities are only defined on its
//! interior `D` (all `u_i > 0`, `ρ_u < 1`).
//!
//! The module provides, for the logarithmic entropy density
//!
//! ```text
//! h(u) = Σ u_i log u_i + (1 - ρ_u) log(1 - ρ_u),
//! ```
//!
//! its gradient `Dh(u)_i = log(u_i / (1 - ρ_u))`, the inverse of the gradient
//! (a total function from Rⁿ onto the open simplex), the Hessian `D²h(u)`,
//! the diffusion matrix `A(u)` of the flux law, the mobility matrix
//! `M(u) = A(u)·(D²h(u))⁻¹`, relative entropy, and a numeric certificate for
//! the ellipticity bound
//!
//! ```text
//! zᵀ D²h(u) A(u) z  ≥  α Σ z_i² / u_i,      α = min_{i≠j} K_ij,
//! ```
//!
//! which is the inequality that keeps solutions inside the simplex.

use nalgebra::DMatrix;
use thiserror::Error;

/// Slack accepted on simplex membership before a composition is rejected.
///
/// Entries in `[-SIMPLEX_TOL, 0)` and masses in `(1, 1 + SIMPLEX_TOL]` are
/// clamped back onto the simplex so that floating-point drift from projection
/// steps cannot poison downstream evaluations; anything worse is an error.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Errors produced by simplex and coefficient-table validation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    /// A fraction was negative beyond [`SIMPLEX_TOL`].
    #[error("fraction {value:e} of species {index} is negative beyond tolerance")]
    NegativeFraction { index: usize, value: f64 },
    /// The fractions summed to more than one beyond [`SIMPLEX_TOL`].
    #[error("total fraction {rho} exceeds 1 beyond tolerance")]
    MassExcess { rho: f64 },
    /// The operation is only defined strictly inside the simplex.
    #[error("operation requires a strictly interior composition")]
    BoundaryComposition,
    /// A composition and a coefficient table disagree on the species count.
    #[error("dimension mismatch: {composition} reduced species vs table for {table}")]
    DimensionMismatch { composition: usize, table: usize },
    /// At least one non-eliminated species is required.
    #[error("species count must be at least 1")]
    NoSpecies,
    /// The coefficient table is not square of the declared size.
    #[error("coefficient table must be square of size {expected}, got row of length {got}")]
    MalformedTable { expected: usize, got: usize },
    /// `K[i][j] != K[j][i]`.
    #[error("coefficient table is not symmetric at ({i},{j})")]
    AsymmetricCoefficients { i: usize, j: usize },
    /// A diagonal coefficient was nonzero.
    #[error("coefficient table has nonzero diagonal entry at {i}")]
    NonzeroDiagonal { i: usize },
    /// An off-diagonal coefficient was zero or negative.
    #[error("off-diagonal coefficient K[{i}][{j}] = {value} must be positive")]
    NonpositiveCoefficient { i: usize, j: usize, value: f64 },
}

/// Number of non-eliminated species `n`; the mixture has `n + 1` species.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeciesCount(usize);

impl SpeciesCount {
    pub fn new(n: usize) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::NoSpecies);
        }
        Ok(Self(n))
    }

    /// Number of independent fractions, `n`.
    pub fn reduced(self) -> usize {
        self.0
    }

    /// Total number of species, `n + 1`.
    pub fn total(self) -> usize {
        self.0 + 1
    }
}

/// Symmetric nonnegative cross-diffusion coefficient table `K[i][j]`,
/// indexed by full species labels `0..=n`, with zero diagonal and strictly
/// positive off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct KMatrix {
    total: usize,
    entries: Vec<f64>,
}

impl KMatrix {
    /// Validates and stores a full `(n+1) × (n+1)` table.
    ///
    /// Symmetry is required up to `1e-12` (absolute on entries of order one);
    /// entries are stored exactly as given.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let total = rows.len();
        if total < 2 {
            return Err(ModelError::NoSpecies);
        }
        for row in rows {
            if row.len() != total {
                return Err(ModelError::MalformedTable {
                    expected: total,
                    got: row.len(),
                });
            }
        }
        for i in 0..total {
            if rows[i][i] != 0.0 {
                return Err(ModelError::NonzeroDiagonal { i });
            }
            for j in (i + 1)..total {
                if (rows[i][j] - rows[j][i]).abs() > 1e-12 {
                    return Err(ModelError::AsymmetricCoefficients { i, j });
                }
                if rows[i][j] <= 0.0 {
                    return Err(ModelError::NonpositiveCoefficient {
                        i,
                        j,
                        value: rows[i][j],
                    });
                }
            }
        }
        let entries = rows.iter().flatten().copied().collect();
        Ok(Self { total, entries })
    }

    /// Species count carried by the table.
    pub fn species(&self) -> SpeciesCount {
        SpeciesCount(self.total - 1)
    }

    /// Coefficient `K[i][j]` for full species indices `0..=n`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.total + j]
    }

    /// Smallest off-diagonal coefficient; the ellipticity constant `α`.
    pub fn min_off_diagonal(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.total {
            for j in 0..self.total {
                if i != j {
                    min = min.min(self.get(i, j));
                }
            }
        }
        min
    }
}

/// A point of the closed simplex `D̄`: the `n` fractions of species `1..=n`.
///
/// The fraction of the eliminated species is carried alongside rather than
/// recomputed as `1 - Σ u_i` on demand: near the `ρ_u = 1` face that
/// subtraction cancels catastrophically, and [`entropy_grad_inv`] can supply
/// the exact value instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    u: Vec<f64>,
    eliminated: f64,
}

impl Composition {
    /// Validates fractions against the simplex, clamping drift within
    /// [`SIMPLEX_TOL`]: small negative entries become `0`, and a total mass in
    /// `(1, 1 + SIMPLEX_TOL]` is rescaled to exactly `1`.
    pub fn new(mut u: Vec<f64>) -> Result<Self, ModelError> {
        if u.is_empty() {
            return Err(ModelError::NoSpecies);
        }
        for (index, x) in u.iter_mut().enumerate() {
            if *x < -SIMPLEX_TOL {
                return Err(ModelError::NegativeFraction { index, value: *x });
            }
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let rho: f64 = u.iter().sum();
        if rho > 1.0 + SIMPLEX_TOL {
            return Err(ModelError::MassExcess { rho });
        }
        if rho > 1.0 {
            for x in &mut u {
                *x /= rho;
            }
        }
        let eliminated = (1.0 - u.iter().sum::<f64>()).max(0.0);
        Ok(Self { u, eliminated })
    }

    /// Fractions of the non-eliminated species `1..=n`.
    pub fn reduced(&self) -> &[f64] {
        &self.u
    }

    /// Number of non-eliminated species.
    pub fn n(&self) -> usize {
        self.u.len()
    }

    /// Total fraction `ρ_u = Σ u_i` of the non-eliminated species.
    pub fn rho(&self) -> f64 {
        self.u.iter().sum()
    }

    /// Fraction `1 - ρ_u` of the eliminated species `0`.
    pub fn eliminated(&self) -> f64 {
        self.eliminated
    }

    /// All `n + 1` fractions with species `0` first.
    pub fn full(&self) -> Vec<f64> {
        let mut all = Vec::with_capacity(self.u.len() + 1);
        all.push(self.eliminated());
        all.extend_from_slice(&self.u);
        all
    }

    /// Whether the composition lies strictly inside the simplex.
    pub fn is_interior(&self) -> bool {
        self.u.iter().all(|&x| x > 0.0) && self.eliminated > 0.0
    }
}

/// Constants of the ellipticity bound: `α` and the exponents `m_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityConstants {
    /// Smallest off-diagonal coefficient of the table.
    pub alpha: f64,
    /// Exponents of the bound; `1/2` for every species in this model.
    pub m: Vec<f64>,
}

impl EllipticityConstants {
    pub fn from_table(k: &KMatrix) -> Self {
        Self {
            alpha: k.min_off_diagonal(),
            m: vec![0.5; k.species().reduced()],
        }
    }
}

/// `x log x`, extended by continuity with `0` at `x = 0`.
fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Entropy density on reduced fractions, shared with the field-level
/// diagnostics so they avoid re-allocating a [`Composition`] per grid cell.
pub(crate) fn entropy_reduced(u: &[f64], eliminated: f64) -> f64 {
    u.iter().copied().map(xlogx).sum::<f64>() + xlogx(eliminated)
}

/// `Σ u_i log(u_i / f_i)` over one slot, with `0 log 0 = 0`.
pub(crate) fn kl_term(u: f64, f: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        u * (u / f).ln()
    }
}

/// Entropy density `h(u) = Σ u_i log u_i + (1 - ρ_u) log(1 - ρ_u)`.
///
/// Bounded by `-log(n + 1) ≤ h(u) ≤ 0` on the closed simplex; terms with a
/// zero argument contribute `0`.
pub fn entropy(u: &Composition) -> f64 {
    entropy_reduced(u.reduced(), u.eliminated())
}

/// Entropy gradient `Dh(u)_i = log(u_i / (1 - ρ_u))`, defined strictly inside
/// the simplex.
pub fn entropy_grad(u: &Composition) -> Result<Vec<f64>, ModelError> {
    if !u.is_interior() {
        return Err(ModelError::BoundaryComposition);
    }
    let u0 = u.eliminated();
    Ok(u.reduced().iter().map(|&x| (x / u0).ln()).collect())
}

/// Inverse of the entropy gradient,
/// `w ↦ u_i = e^{w_i} / (1 + Σ_j e^{w_j})`, a total function from Rⁿ onto the
/// open simplex.
///
/// Evaluated with a shift by the largest component so that no exponential
/// overflows; for components below roughly `-745` relative to the largest the
/// result underflows to `0`, the closest representable point of the open
/// simplex. The eliminated fraction `e^{-shift} / denom` is stored exactly,
/// so the round trip through [`entropy_grad`] stays accurate even where
/// `1 - ρ_u` would cancel to noise.
pub fn entropy_grad_inv(w: &[f64]) -> Composition {
    let shift = w.iter().copied().fold(0.0f64, f64::max);
    let exps: Vec<f64> = w.iter().map(|&x| (x - shift).exp()).collect();
    let zero_exp = (-shift).exp();
    let denom = zero_exp + exps.iter().sum::<f64>();
    Composition {
        u: exps.iter().map(|&e| e / denom).collect(),
        eliminated: zero_exp / denom,
    }
}

/// Entropy Hessian `D²h(u)`: `H_ii = 1/u_i + 1/(1 - ρ_u)`,
/// `H_ij = 1/(1 - ρ_u)` for `i ≠ j`; symmetric positive definite on the open
/// simplex.
pub fn entropy_hessian(u: &Composition) -> Result<DMatrix<f64>, ModelError> {
    if !u.is_interior() {
        return Err(ModelError::BoundaryComposition);
    }
    let n = u.n();
    let inv0 = 1.0 / u.eliminated();
    let reduced = u.reduced();
    Ok(DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            1.0 / reduced[r] + inv0
        } else {
            inv0
        }
    }))
}

/// Diffusion matrix `A(u)` of the reduced system (rows and columns are
/// species `1..=n`):
///
/// ```text
/// A_ii = Σ_{j≠i} (K_ij - K_i0) u_j + K_i0,    A_ij = -(K_ij - K_i0) u_i.
/// ```
pub fn diffusion_matrix(u: &Composition, k: &KMatrix) -> Result<DMatrix<f64>, ModelError> {
    let n = u.n();
    if k.species().reduced() != n {
        return Err(ModelError::DimensionMismatch {
            composition: n,
            table: k.species().reduced(),
        });
    }
    let reduced = u.reduced();
    let mut a = DMatrix::zeros(n, n);
    for r in 0..n {
        let i = r + 1;
        let ki0 = k.get(i, 0);
        let mut diag = ki0;
        for c in 0..n {
            let j = c + 1;
            if i == j {
                continue;
            }
            let excess = k.get(i, j) - ki0;
            diag += excess * reduced[c];
            a[(r, c)] = -excess * reduced[r];
        }
        a[(r, r)] = diag;
    }
    Ok(a)
}

/// Mobility matrix `M(u) = A(u)·(D²h(u))⁻¹`, in closed form:
///
/// ```text
/// M_ii = K_i0 (1 - ρ_u) u_i + Σ_{j≠i} K_ij u_i u_j,    M_ij = -K_ij u_i u_j.
/// ```
///
/// Symmetric positive semi-definite on the closed simplex; row and column `i`
/// vanish together with `u_i`.
pub fn mobility_matrix(u: &Composition, k: &KMatrix) -> Result<DMatrix<f64>, ModelError> {
    let n = u.n();
    if k.species().reduced() != n {
        return Err(ModelError::DimensionMismatch {
            composition: n,
            table: k.species().reduced(),
        });
    }
    let reduced = u.reduced();
    let u0 = u.eliminated();
    let mut m = DMatrix::zeros(n, n);
    for r in 0..n {
        let i = r + 1;
        let mut diag = k.get(i, 0) * u0 * reduced[r];
        for c in 0..n {
            let j = c + 1;
            if i == j {
                continue;
            }
            let pair = k.get(i, j) * reduced[r] * reduced[c];
            diag += pair;
            m[(r, c)] = -pair;
        }
        m[(r, r)] = diag;
    }
    Ok(m)
}

/// Relative entropy `h̄(u) = Σ u_i log(u_i / f_i) + u_0 log(u_0 / f_0)`
/// of `u ∈ D̄` against a strictly interior reference `f`.
///
/// Nonnegative, and zero exactly at `u = f`.
pub fn relative_entropy(u: &Composition, f: &Composition) -> Result<f64, ModelError> {
    if u.n() != f.n() {
        return Err(ModelError::DimensionMismatch {
            composition: u.n(),
            table: f.n(),
        });
    }
    if !f.is_interior() {
        return Err(ModelError::BoundaryComposition);
    }
    let mut h = kl_term(u.eliminated(), f.eliminated());
    for (&ui, &fi) in u.reduced().iter().zip(f.reduced()) {
        h += kl_term(ui, fi);
    }
    Ok(h)
}

/// Evaluates both sides of the ellipticity bound at `(u, z)`:
/// returns `(zᵀ D²h(u) A(u) z, α Σ z_i² / u_i)` with `α` the smallest
/// off-diagonal coefficient.
///
/// The certificate uses the exponents `m_i = 1/2`, for which the right side
/// `α Σ z_i² u_i^{2m_i - 2}` reduces to `α Σ z_i² / u_i`; other exponents in
/// `(0, 1]` would weaken the bound and are not evaluated here.
pub fn ellipticity_check(
    u: &Composition,
    z: &[f64],
    k: &KMatrix,
) -> Result<(f64, f64), ModelError> {
    if z.len() != u.n() {
        return Err(ModelError::DimensionMismatch {
            composition: u.n(),
            table: z.len(),
        });
    }
    if !u.is_interior() {
        return Err(ModelError::BoundaryComposition);
    }
    let h = entropy_hessian(u)?;
    let a = diffusion_matrix(u, k)?;
    let zv = nalgebra::DVector::from_column_slice(z);
    let lhs = zv.dot(&(&h * (&a * &zv)));
    let alpha = k.min_off_diagonal();
    let rhs = alpha
        * z.iter()
            .zip(u.reduced())
            .map(|(&zi, &ui)| zi * zi / ui)
            .sum::<f64>();
    Ok((lhs, rhs))
}
