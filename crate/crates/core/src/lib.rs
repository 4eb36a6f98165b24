//! Solver-and-optimizer toolkit for a one-dimensional multi-species
//! cross-diffusion system on a growing domain, as it arises in physical vapor
//! deposition (PVD): a thin film grows by absorbing injected species at its
//! surface while the species interdiffuse in the bulk.
//!
//! The crate is organized around the rescaled moving-domain formulation, in
//! which the growing film `(0, e(t))` is mapped onto the unit interval and the
//! growth enters as a drift term and a boundary inflow:
//!
//! * [`model`] — the composition simplex, the logarithmic entropy density and
//!   its derivatives, the diffusion matrix `A(u)`, the mobility matrix
//!   `M(u)`, and the ellipticity certificate behind the entropy structure.
//! * [`flux`] — time-dependent injection schedules, their exact per-step
//!   averages, and the induced film-thickness track.
//! * [`solver`] — the fully implicit finite-difference scheme: per-step
//!   Newton solves of the coupled nonlinear system followed by a simplex
//!   projection, producing trajectories.
//! * [`diagnostics`] — entropy series, weighted-entropy monotonicity, exact
//!   mean-fraction oracle, long-time decay quantities with affine fits, and
//!   L¹-vs-entropy gap checks.
//! * [`optimizer`] — the flux-reconstruction problem: quadratic cost on final
//!   thickness and concentrations, discrete-adjoint gradient through the
//!   implicit scheme, and a projected BFGS loop.
//! * [`lattice`] — the microscopic counterpart: multi-species exchange
//!   dynamics on a site lattice, coarse-graining, and comparison against the
//!   macroscopic solver under diffusive scaling.

pub mod diagnostics;
pub mod flux;
pub mod lattice;
pub mod model;
pub mod optimizer;
pub mod solver;
