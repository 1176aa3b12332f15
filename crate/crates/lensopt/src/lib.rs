//! Shape optimization of a focusing acoustic lens.
//!
//! This crate simulates finite-amplitude ultrasound propagation through a
//! two-material domain — an immersed lens Ω₊ surrounded by fluid Ω₋ — and
//! optimizes the lens shape so the computed pressure field tracks a desired
//! one.  The acoustic model is a Westervelt-type wave equation with a
//! q-Laplace damping term,
//!
//!   (1/λ)(1 − 2ku) ü − div((1/ϱ)∇u) − div(b[(1−δ) + δ|∇u̇|^{q-1}]∇u̇)
//!     = (2k/λ) (u̇)²,
//!
//! with piecewise-constant material parameters jumping across the lens
//! boundary Γ and homogeneous Dirichlet conditions on ∂Ω.  The tracking cost
//! J = ∫₀ᵀ∫_Ω (u − u_d)² is differentiated with respect to lens shape in
//! two independent ways — a volume expression over the deformed bulk and a
//! boundary expression of jump terms on Γ — and both are cross-checked
//! against directional finite differences of the cost under actual mesh
//! deformation.  A Riesz-gradient descent with Armijo line search then moves
//! the lens.
//!
//! Module map:
//!
//! * [`kernels`] — pointwise q-Laplace flux, its linearization, inequality
//!   oracles.
//! * [`geometry`] — lens-fitted triangulations, displacement fields, mesh
//!   deformation and admissibility checks.
//! * [`fem`] — sparse matrices, iterative solvers, P1 element machinery.
//! * [`state`] — implicit midpoint solver for the damped nonlinear wave
//!   equation, cost evaluation, energy diagnostics.
//! * [`adjoint`] — backward-in-time linear adjoint solver.
//! * [`shape`] — volume and boundary shape-derivative forms, the
//!   finite-difference deformation oracle, and continuity diagnostics.
//! * [`optimizer`] — Riesz descent field, line search, optimization loop.
//! * [`config`] — run configuration parsing and validation.
//! * [`io`] — CSV/VTK exports and the run manifest.
//! * [`cli`] — subcommand driver shared by the thin binary.

#![deny(missing_docs)]

pub mod adjoint;
pub mod cli;
pub mod config;
pub mod fem;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod la;
pub mod optimizer;
pub mod shape;
pub mod state;

pub use kernels::{KernelError, RegularizedNorm};
