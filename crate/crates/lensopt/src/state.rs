//! Forward solver for the damped nonlinear wave equation.
//!
//! The acoustic pressure u satisfies, weakly on (0,T) × Ω with u = 0 on ∂Ω,
//!
//!   ∫ (1/λ)(1 − 2ku) ü φ + (1/ϱ) ∇u·∇φ
//!     + b(1−δ) ∇u̇·∇φ + bδ |∇u̇|^{q-1} ∇u̇·∇φ − (2k/λ)(u̇)² φ = 0,
//!
//! with piecewise-constant λ, k, ϱ, b, δ jumping across the lens boundary
//! and a single global exponent q.  Interface transmission conditions are
//! imposed weakly by assembling with a single-valued P1 space.
//!
//! Discretization: P1 in space; implicit midpoint in time on the system
//! (u, v = u̇).  With v^{n+1} as the unknown w,
//!
//!   u_mid = uⁿ + (Δt/4)(vⁿ + w),   v_mid = (vⁿ + w)/2,   a = (w − vⁿ)/Δt,
//!
//! and the weak form is enforced at the midpoint.  The Newton iteration
//! uses the exact linearization of the damping flux; if it stalls, a damped
//! Picard iteration (isotropic approximation of the flux Jacobian) takes
//! over.  Accelerations ü are recovered by central differences of v with
//! second-order one-sided stencils at the endpoints.
//!
//! The degeneracy factor 1 − 2ku multiplies ü and must stay positive; each
//! accepted step checks it against a configurable floor and the solver
//! aborts rather than integrate a degenerate equation.

use thiserror::Error;

use crate::fem::{
    self, CsrMatrix, ElementGeometry, Parallelism,
};
use crate::geometry::{Mesh2D, SubdomainLabel};
use crate::kernels::{flux, RegularizedNorm};
use crate::la::{self, Vec2};

/// Material constants of one subdomain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubdomainParams {
    /// Bulk modulus λ; the sound speed is √(λ/ϱ).
    pub bulk_modulus: f64,
    /// Acoustic nonlinearity k (multiplies both the 1 − 2ku factor and the
    /// (u̇)² source).
    pub nonlinearity: f64,
    /// Mass density ϱ.
    pub mass_density: f64,
    /// Damping strength b.
    pub diffusivity: f64,
    /// Mix δ ∈ [0,1] between linear ((1−δ)b) and q-type (δb) damping.
    pub damping_mix: f64,
}

impl SubdomainParams {
    /// Sound speed √(λ/ϱ).
    pub fn sound_speed(&self) -> f64 {
        (self.bulk_modulus / self.mass_density).sqrt()
    }
}

/// Two-material parameter set plus the global damping exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    /// Constants inside the lens.
    pub lens: SubdomainParams,
    /// Constants in the surrounding fluid.
    pub fluid: SubdomainParams,
    /// Damping exponent q ≥ 1 (shared by both materials).
    pub exponent: f64,
    /// Regularization ε of |∇u̇|_ε in the damping kernels.
    pub regularization: f64,
}

impl MaterialParams {
    /// Constants of the subdomain an element with the given label is in.
    pub fn of(&self, label: SubdomainLabel) -> &SubdomainParams {
        match label {
            SubdomainLabel::Lens => &self.lens,
            SubdomainLabel::Fluid => &self.fluid,
        }
    }

    /// The regularized norm used by the damping kernels.
    pub fn norm(&self) -> RegularizedNorm {
        RegularizedNorm::new(self.regularization)
    }

    /// Violations of the parameter ranges, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, s) in [("lens", &self.lens), ("fluid", &self.fluid)] {
            if !(s.bulk_modulus > 0.0) {
                out.push(format!("{name}: bulk modulus must be positive, got {}", s.bulk_modulus));
            }
            if !(s.mass_density > 0.0) {
                out.push(format!("{name}: mass density must be positive, got {}", s.mass_density));
            }
            if !(s.diffusivity >= 0.0) {
                out.push(format!("{name}: diffusivity must be nonnegative, got {}", s.diffusivity));
            }
            if !(s.damping_mix >= 0.0 && s.damping_mix <= 1.0) {
                out.push(format!("{name}: damping mix must lie in [0,1], got {}", s.damping_mix));
            }
            if !s.nonlinearity.is_finite() {
                out.push(format!("{name}: nonlinearity must be finite"));
            }
        }
        if !(self.exponent >= 1.0) {
            out.push(format!("damping exponent must satisfy q >= 1, got {}", self.exponent));
        }
        if !(self.regularization >= 0.0) {
            out.push(format!("regularization must be nonnegative, got {}", self.regularization));
        }
        out
    }
}

/// Uniform time grid on [0, T].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    /// Final time T > 0.
    pub t_end: f64,
    /// Number of steps N ≥ 2; there are N+1 time levels.
    pub n_steps: usize,
}

impl TimeGrid {
    /// Construct and validate.
    pub fn new(t_end: f64, n_steps: usize) -> Self {
        assert!(t_end > 0.0, "final time must be positive");
        assert!(n_steps >= 2, "need at least two time steps");
        Self { t_end, n_steps }
    }

    /// Step size Δt = T/N.
    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }
}

/// Discrete state trajectory: nodal values of u, u̇, ü at every time level,
/// including the initial data at level 0.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    /// Time grid the trajectory lives on.
    pub grid: TimeGrid,
    /// Pressure u, one nodal vector per time level (N+1 of them).
    pub u: Vec<Vec<f64>>,
    /// Rate u̇.
    pub ut: Vec<Vec<f64>>,
    /// Acceleration ü, recovered by differencing u̇.
    pub utt: Vec<Vec<f64>>,
}

impl StateTrajectory {
    /// Number of nodes per time level.
    pub fn n_nodes(&self) -> usize {
        self.u[0].len()
    }
}

/// Solver tolerances and guard rails.
#[derive(Debug, Clone, Copy)]
pub struct DiagnosticsBounds {
    /// Lowest admissible degeneracy factor min(1 − 2ku).
    pub degeneracy_floor: f64,
    /// Absolute Newton residual tolerance (max norm).
    pub newton_tol_abs: f64,
    /// Relative Newton residual tolerance (against the initial residual).
    pub newton_tol_rel: f64,
    /// Newton iteration cap per step.
    pub max_newton_iterations: usize,
    /// Damped-Picard fallback iteration cap per step.
    pub max_picard_iterations: usize,
    /// Relative tolerance of the inner linear solves.
    pub linear_tol: f64,
    /// Inner linear iteration cap.
    pub max_linear_iterations: usize,
}

impl Default for DiagnosticsBounds {
    fn default() -> Self {
        Self {
            degeneracy_floor: 0.1,
            newton_tol_abs: 1e-10,
            newton_tol_rel: 1e-12,
            max_newton_iterations: 30,
            max_picard_iterations: 100,
            linear_tol: 1e-12,
            max_linear_iterations: 2000,
        }
    }
}

/// Forward solver failures.
#[derive(Debug, Clone, Error)]
pub enum StateError {
    /// The factor 1 − 2ku dropped below the configured floor.
    #[error("degeneracy factor {min_factor:.4} fell below the floor {floor} at step {step}")]
    DegeneracyBreach {
        /// Time step at which the breach was detected.
        step: usize,
        /// Smallest nodal factor observed.
        min_factor: f64,
        /// Configured floor.
        floor: f64,
    },
    /// Neither Newton nor the damped fallback reached tolerance.
    #[error("nonlinear solve stalled at step {step}: residual {residual:.3e} after {iterations} iterations")]
    NonlinearSolveFailure {
        /// Offending time step.
        step: usize,
        /// Iterations spent (Newton plus fallback).
        iterations: usize,
        /// Residual max-norm at failure.
        residual: f64,
    },
    /// Mismatched discretizations (node counts or time levels).
    #[error("grid mismatch: expected {expected}, got {got} ({what})")]
    GridMismatch {
        /// What was compared.
        what: &'static str,
        /// Expected count.
        expected: usize,
        /// Actual count.
        got: usize,
    },
}

/// Desired pressure field u_d: either constant in time or one nodal vector
/// per time level.
///
/// A nodal target is a P1 function and integrates exactly under the
/// edge-midpoint rule.  A target built with [`TargetField::sampled`]
/// additionally stores the exact values of the underlying analytic field at
/// the quadrature points, so the tracking cost is not limited by P1
/// interpolation of u_d.
#[derive(Debug, Clone)]
pub struct TargetField {
    /// Nodal snapshots: either exactly one (held constant in time) or N+1.
    pub values: Vec<Vec<f64>>,
    /// Optional exact samples at the three edge midpoints of every element,
    /// same time-level layout as `values`.
    pub quadrature_values: Option<Vec<Vec<[f64; 3]>>>,
}

impl TargetField {
    /// A target constant in time.
    pub fn constant(field: Vec<f64>) -> Self {
        Self { values: vec![field], quadrature_values: None }
    }

    /// A fully time-resolved nodal target.
    pub fn trajectory(values: Vec<Vec<f64>>) -> Self {
        Self { values, quadrature_values: None }
    }

    /// Sample an analytic space-time field u_d(x, t) at the nodes and the
    /// element edge midpoints for every time level of `grid`.
    pub fn sampled(mesh: &Mesh2D, grid: TimeGrid, f: impl Fn(Vec2, f64) -> f64) -> Self {
        let dt = grid.dt();
        let mut values = Vec::with_capacity(grid.n_steps + 1);
        let mut quad = Vec::with_capacity(grid.n_steps + 1);
        for n in 0..=grid.n_steps {
            let t = n as f64 * dt;
            values.push(mesh.sample_scalar(|p| f(p, t)));
            let per_el = mesh
                .elements
                .iter()
                .map(|el| {
                    let p = [mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]]];
                    // Midpoint k is opposite node k.
                    [
                        f(la::scale(0.5, la::add(p[1], p[2])), t),
                        f(la::scale(0.5, la::add(p[2], p[0])), t),
                        f(la::scale(0.5, la::add(p[0], p[1])), t),
                    ]
                })
                .collect();
            quad.push(per_el);
        }
        Self { values, quadrature_values: Some(quad) }
    }

    /// Nodal snapshot at time level `n`.
    pub fn at(&self, n: usize) -> &[f64] {
        if self.values.len() == 1 {
            &self.values[0]
        } else {
            &self.values[n]
        }
    }

    /// Values at the edge midpoints of element `e` (node-ordered layout of
    /// the quadrature rule) at time level `n`.
    pub fn midpoints_at(&self, n: usize, e: usize, el: &[usize; 3]) -> [f64; 3] {
        match &self.quadrature_values {
            Some(levels) => {
                let level = if levels.len() == 1 { &levels[0] } else { &levels[n] };
                level[e]
            }
            None => {
                let d = self.at(n);
                fem::midpoint_values([d[el[0]], d[el[1]], d[el[2]]])
            }
        }
    }

    /// Check compatibility with a trajectory of `n_levels` levels of
    /// `n_nodes` values.
    pub fn check(&self, n_levels: usize, n_nodes: usize) -> Result<(), StateError> {
        if self.values.len() != 1 && self.values.len() != n_levels {
            return Err(StateError::GridMismatch {
                what: "target time levels",
                expected: n_levels,
                got: self.values.len(),
            });
        }
        for v in &self.values {
            if v.len() != n_nodes {
                return Err(StateError::GridMismatch {
                    what: "target node count",
                    expected: n_nodes,
                    got: v.len(),
                });
            }
        }
        if let Some(q) = &self.quadrature_values {
            if q.len() != self.values.len() {
                return Err(StateError::GridMismatch {
                    what: "target quadrature levels",
                    expected: self.values.len(),
                    got: q.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-element data fixed over a solve.
pub(crate) struct ElementContext {
    pub(crate) nodes: [usize; 3],
    pub(crate) geo: ElementGeometry,
    pub(crate) sub: SubdomainParams,
}

pub(crate) fn element_contexts(mesh: &Mesh2D, params: &MaterialParams) -> Vec<ElementContext> {
    let geos = mesh.element_geometries();
    mesh.elements
        .iter()
        .zip(geos)
        .zip(&mesh.labels)
        .map(|((el, geo), &label)| ElementContext {
            nodes: *el,
            geo,
            sub: *params.of(label),
        })
        .collect()
}

/// Isotropic + aligned linearization tensor of the damping flux at base
/// gradient g: B = |g|^{q-1} I + (q−1)|g|^{q-3} g⊗g, with the exact
/// one-sided limit B = 0 at the singular point (g = 0, ε = 0, q < 3, where
/// the flux is o(|y|) for q > 1).
fn flux_jacobian_tensor(g: Vec2, q: f64, reg: RegularizedNorm) -> la::Mat2 {
    let z = reg.pow(g, q - 1.0);
    let mut b = [[z, 0.0], [0.0, z]];
    if q != 1.0 && !(reg.epsilon == 0.0 && g == [0.0, 0.0]) {
        let zq3 = (q - 1.0) * reg.pow(g, q - 3.0);
        b = la::mat_axpy(&b, zq3, &la::outer(g, g));
    }
    b
}

pub(crate) struct LocalSystem {
    pub(crate) r: [f64; 3],
    pub(crate) j: [[f64; 3]; 3],
}

/// Residual and Jacobian of one midpoint step, elementwise.
#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble_step(
    contexts: &[ElementContext],
    u_n: &[f64],
    v_n: &[f64],
    w: &[f64],
    dt: f64,
    q: f64,
    reg: RegularizedNorm,
    exact_jacobian: bool,
    par: &Parallelism,
) -> Vec<LocalSystem> {
    par.map(contexts.len(), |e| {
        let ctx = &contexts[e];
        let s = &ctx.sub;
        let idx = ctx.nodes;
        let mut u_mid = [0.0; 3];
        let mut v_mid = [0.0; 3];
        let mut accel = [0.0; 3];
        let mut w_loc = [0.0; 3];
        for i in 0..3 {
            let g = idx[i];
            u_mid[i] = u_n[g] + 0.25 * dt * (v_n[g] + w[g]);
            v_mid[i] = 0.5 * (v_n[g] + w[g]);
            accel[i] = (w[g] - v_n[g]) / dt;
            w_loc[i] = w[g];
        }
        let um = fem::midpoint_values(u_mid);
        let vm = fem::midpoint_values(v_mid);
        let am = fem::midpoint_values(accel);
        let g_u = fem::p1_gradient(&ctx.geo, u_mid);
        let g_v = fem::p1_gradient(&ctx.geo, v_mid);

        let inv_l = 1.0 / s.bulk_modulus;
        let k = s.nonlinearity;
        let inv_rho = 1.0 / s.mass_density;
        let b_lin = s.diffusivity * (1.0 - s.damping_mix);
        let b_q = s.diffusivity * s.damping_mix;

        // Residual: mass-type weights at midpoints + constant flux vector.
        let r_weights = [
            inv_l * (1.0 - 2.0 * k * um[0]) * am[0] - 2.0 * k * inv_l * vm[0] * vm[0],
            inv_l * (1.0 - 2.0 * k * um[1]) * am[1] - 2.0 * k * inv_l * vm[1] * vm[1],
            inv_l * (1.0 - 2.0 * k * um[2]) * am[2] - 2.0 * k * inv_l * vm[2] * vm[2],
        ];
        let mut r = fem::local_load(ctx.geo.area, r_weights);
        let mut flux_vec = la::scale(inv_rho, g_u);
        flux_vec = la::axpy(flux_vec, b_lin, g_v);
        flux_vec = la::axpy(flux_vec, b_q, flux(g_v, q, reg));
        for i in 0..3 {
            r[i] += ctx.geo.area * la::dot(flux_vec, ctx.geo.grad[i]);
        }

        // Jacobian with respect to w.
        let mut j_weights = [0.0; 3];
        for m in 0..3 {
            j_weights[m] = inv_l * (1.0 - 2.0 * k * um[m]) / dt;
            if exact_jacobian {
                j_weights[m] +=
                    -2.0 * k * inv_l * 0.25 * dt * am[m] - 2.0 * k * inv_l * vm[m];
            }
        }
        let mut j = fem::local_mass(ctx.geo.area, j_weights);
        let iso = inv_rho * 0.25 * dt + 0.5 * b_lin;
        let mut tensor = [[iso, 0.0], [0.0, iso]];
        if b_q != 0.0 {
            let flux_jac = if exact_jacobian {
                flux_jacobian_tensor(g_v, q, reg)
            } else {
                let z = reg.pow(g_v, q - 1.0);
                [[z, 0.0], [0.0, z]]
            };
            tensor = la::mat_axpy(&tensor, 0.5 * b_q, &flux_jac);
        }
        let j_grad = fem::local_stiffness(&ctx.geo, &tensor);
        for i in 0..3 {
            for jj in 0..3 {
                j[i][jj] += j_grad[i][jj];
            }
        }
        LocalSystem { r, j }
    })
}

pub(crate) fn scatter_step(
    locals: &[LocalSystem],
    contexts: &[ElementContext],
    boundary: &[bool],
    matrix: &mut CsrMatrix,
    residual: &mut [f64],
) {
    matrix.clear();
    residual.iter_mut().for_each(|r| *r = 0.0);
    for (local, ctx) in locals.iter().zip(contexts) {
        matrix.scatter(residual, ctx.nodes, &local.j, &local.r);
    }
    for (i, &bnd) in boundary.iter().enumerate() {
        if bnd {
            residual[i] = 0.0;
        }
    }
    matrix.apply_dirichlet(boundary);
}

fn min_degeneracy_factor(contexts: &[ElementContext], u: &[f64]) -> f64 {
    let mut min = f64::INFINITY;
    for ctx in contexts {
        for &g in &ctx.nodes {
            min = min.min(1.0 - 2.0 * ctx.sub.nonlinearity * u[g]);
        }
    }
    min
}

/// Solve the damped nonlinear wave equation forward in time.
///
/// `u0`, `v0` are nodal initial pressure and rate; both are forced to zero
/// on ∂Ω.  Returns the full trajectory with recovered accelerations.
pub fn solve_state(
    mesh: &Mesh2D,
    params: &MaterialParams,
    grid: TimeGrid,
    u0: &[f64],
    v0: &[f64],
    bounds: &DiagnosticsBounds,
    par: &Parallelism,
) -> Result<StateTrajectory, StateError> {
    let n_nodes = mesh.n_nodes();
    assert_eq!(u0.len(), n_nodes, "initial pressure has wrong node count");
    assert_eq!(v0.len(), n_nodes, "initial rate has wrong node count");
    assert!(params.violations().is_empty(), "invalid material parameters: {:?}", params.violations());

    let contexts = element_contexts(mesh, params);
    let q = params.exponent;
    let reg = params.norm();
    let dt = grid.dt();
    let boundary = &mesh.boundary_node;

    let mut u_cur: Vec<f64> = u0
        .iter()
        .zip(boundary)
        .map(|(&v, &b)| if b { 0.0 } else { v })
        .collect();
    let mut v_cur: Vec<f64> = v0
        .iter()
        .zip(boundary)
        .map(|(&v, &b)| if b { 0.0 } else { v })
        .collect();

    let floor = bounds.degeneracy_floor;
    let start_factor = min_degeneracy_factor(&contexts, &u_cur);
    if start_factor < floor {
        return Err(StateError::DegeneracyBreach { step: 0, min_factor: start_factor, floor });
    }

    let mut u_levels = Vec::with_capacity(grid.n_steps + 1);
    let mut v_levels = Vec::with_capacity(grid.n_steps + 1);
    u_levels.push(u_cur.clone());
    v_levels.push(v_cur.clone());

    let mut matrix = CsrMatrix::from_elements(n_nodes, &mesh.elements);
    let mut residual = vec![0.0; n_nodes];
    let mut delta = vec![0.0; n_nodes];

    for step in 0..grid.n_steps {
        let mut w = v_cur.clone();
        let mut converged = false;
        let mut first_residual = f64::INFINITY;
        let mut iterations = 0;
        let mut last_residual = f64::INFINITY;

        // Newton with the exact flux linearization.
        for it in 0..=bounds.max_newton_iterations {
            let locals =
                assemble_step(&contexts, &u_cur, &v_cur, &w, dt, q, reg, true, par);
            scatter_step(&locals, &contexts, boundary, &mut matrix, &mut residual);
            let res = fem::norm_inf(&residual);
            if it == 0 {
                first_residual = res;
            }
            last_residual = res;
            if res <= bounds.newton_tol_abs || res <= bounds.newton_tol_rel * first_residual {
                converged = true;
                break;
            }
            if it == bounds.max_newton_iterations {
                break;
            }
            delta.iter_mut().for_each(|d| *d = 0.0);
            let rhs: Vec<f64> = residual.iter().map(|r| -r).collect();
            if fem::bicgstab(&matrix, &rhs, &mut delta, bounds.linear_tol, bounds.max_linear_iterations)
                .is_err()
            {
                break;
            }
            for (wi, di) in w.iter_mut().zip(&delta) {
                *wi += di;
            }
            iterations = it + 1;
        }

        // Damped Picard fallback with the isotropic flux approximation.
        if !converged {
            w.copy_from_slice(&v_cur);
            for it in 0..=bounds.max_picard_iterations {
                let locals =
                    assemble_step(&contexts, &u_cur, &v_cur, &w, dt, q, reg, false, par);
                scatter_step(&locals, &contexts, boundary, &mut matrix, &mut residual);
                let res = fem::norm_inf(&residual);
                last_residual = res;
                if res <= bounds.newton_tol_abs || res <= bounds.newton_tol_rel * first_residual {
                    converged = true;
                    break;
                }
                if it == bounds.max_picard_iterations {
                    break;
                }
                delta.iter_mut().for_each(|d| *d = 0.0);
                let rhs: Vec<f64> = residual.iter().map(|r| -r).collect();
                if fem::bicgstab(&matrix, &rhs, &mut delta, bounds.linear_tol, bounds.max_linear_iterations)
                    .is_err()
                {
                    break;
                }
                for (wi, di) in w.iter_mut().zip(&delta) {
                    *wi += 0.5 * di;
                }
                iterations += 1;
            }
        }

        if !converged {
            return Err(StateError::NonlinearSolveFailure {
                step,
                iterations,
                residual: last_residual,
            });
        }

        for i in 0..n_nodes {
            u_cur[i] += 0.5 * dt * (v_cur[i] + w[i]);
        }
        v_cur.copy_from_slice(&w);

        let factor = min_degeneracy_factor(&contexts, &u_cur);
        if factor < floor {
            return Err(StateError::DegeneracyBreach {
                step: step + 1,
                min_factor: factor,
                floor,
            });
        }

        u_levels.push(u_cur.clone());
        v_levels.push(v_cur.clone());
    }

    let utt = recover_accelerations(&v_levels, dt);
    Ok(StateTrajectory { grid, u: u_levels, ut: v_levels, utt })
}

/// Central differences of the rate levels, second-order one-sided at the
/// endpoints.
fn recover_accelerations(v: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = v.len();
    let nn = v[0].len();
    let mut out = vec![vec![0.0; nn]; n];
    for i in 0..nn {
        out[0][i] = (-3.0 * v[0][i] + 4.0 * v[1][i] - v[2][i]) / (2.0 * dt);
        out[n - 1][i] = (3.0 * v[n - 1][i] - 4.0 * v[n - 2][i] + v[n - 3][i]) / (2.0 * dt);
        for l in 1..n - 1 {
            out[l][i] = (v[l + 1][i] - v[l - 1][i]) / (2.0 * dt);
        }
    }
    out
}

/// Tracking cost J = ∫₀ᵀ ∫_Ω (u − u_d)² dx dt, with the edge-midpoint rule
/// in space (exact for the P1 integrand) and the trapezoid rule in time.
pub fn evaluate_cost(
    mesh: &Mesh2D,
    traj: &StateTrajectory,
    target: &TargetField,
) -> Result<f64, StateError> {
    let n_levels = traj.u.len();
    if traj.n_nodes() != mesh.n_nodes() {
        return Err(StateError::GridMismatch {
            what: "trajectory node count",
            expected: mesh.n_nodes(),
            got: traj.n_nodes(),
        });
    }
    target.check(n_levels, mesh.n_nodes())?;
    let geos = mesh.element_geometries();
    let dt = traj.grid.dt();
    let mut total = 0.0;
    for n in 0..n_levels {
        let weight = if n == 0 || n == n_levels - 1 { 0.5 } else { 1.0 };
        let u = &traj.u[n];
        let mut space = 0.0;
        for (e, (el, geo)) in mesh.elements.iter().zip(&geos).enumerate() {
            let um = fem::midpoint_values([u[el[0]], u[el[1]], u[el[2]]]);
            let dm = target.midpoints_at(n, e, el);
            let diff = [um[0] - dm[0], um[1] - dm[1], um[2] - dm[2]];
            space += geo.area / 3.0 * (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]);
        }
        total += weight * dt * space;
    }
    Ok(total)
}

/// Degeneracy diagnostics of a computed trajectory.
#[derive(Debug, Clone, Copy)]
pub struct DegeneracyReport {
    /// a₀ = 2·max|k|·max_t ‖u‖_∞, the guaranteed deviation bound.
    pub a0: f64,
    /// Smallest factor min over time, elements, and nodes of 1 − 2ku.
    pub min_factor: f64,
    /// Largest factor.
    pub max_factor: f64,
}

impl DegeneracyReport {
    /// The factors must lie in [1 − a₀, 1 + a₀] by construction; exposed
    /// so tests can assert the two computations agree.
    pub fn consistent(&self) -> bool {
        let tol = 1e-12 * (1.0 + self.a0);
        self.min_factor >= 1.0 - self.a0 - tol && self.max_factor <= 1.0 + self.a0 + tol
    }
}

/// Degeneracy margin of a trajectory under the given materials.
pub fn degeneracy_margin(
    mesh: &Mesh2D,
    params: &MaterialParams,
    traj: &StateTrajectory,
) -> DegeneracyReport {
    let contexts = element_contexts(mesh, params);
    let max_abs_k = params
        .lens
        .nonlinearity
        .abs()
        .max(params.fluid.nonlinearity.abs());
    let mut sup_u = 0.0_f64;
    let mut min_factor = f64::INFINITY;
    let mut max_factor = f64::NEG_INFINITY;
    for u in &traj.u {
        for ctx in &contexts {
            for &g in &ctx.nodes {
                let f = 1.0 - 2.0 * ctx.sub.nonlinearity * u[g];
                min_factor = min_factor.min(f);
                max_factor = max_factor.max(f);
            }
        }
        sup_u = sup_u.max(fem::norm_inf(u));
    }
    DegeneracyReport {
        a0: 2.0 * max_abs_k * sup_u,
        min_factor,
        max_factor,
    }
}

/// Realized energy quantities of a trajectory: the quantities controlled by
/// the energy estimate, the data norms controlling them, and their ratio.
#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    /// sup over time of ‖u̇‖²_{L²}.
    pub sup_rate_sq: f64,
    /// sup over time of ‖∇u‖²_{L²}.
    pub sup_pressure_grad_sq: f64,
    /// ∫₀ᵀ ‖∇u̇‖²_{L²} dt.
    pub rate_grad_integral: f64,
    /// ∫₀ᵀ ∫ |∇u̇|^{q+1} dx dt.
    pub damping_integral: f64,
    /// ‖u̇(0)‖²_{L²} + ‖∇u(0)‖²_{L²}.
    pub data_norm_sq: f64,
    /// (sup_rate_sq + sup_pressure_grad_sq + integrals) / data_norm_sq.
    pub ratio: f64,
}

/// Compute the realized energy report of a trajectory.
pub fn energy_report(mesh: &Mesh2D, params: &MaterialParams, traj: &StateTrajectory) -> EnergyReport {
    let geos = mesh.element_geometries();
    let dt = traj.grid.dt();
    let q = params.exponent;
    let l2_sq = |field: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (el, geo) in mesh.elements.iter().zip(&geos) {
            let m = fem::midpoint_values([field[el[0]], field[el[1]], field[el[2]]]);
            acc += geo.area / 3.0 * (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]);
        }
        acc
    };
    let grad_sq = |field: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (el, geo) in mesh.elements.iter().zip(&geos) {
            let g = fem::p1_gradient(geo, [field[el[0]], field[el[1]], field[el[2]]]);
            acc += geo.area * la::dot(g, g);
        }
        acc
    };
    let grad_pow = |field: &[f64], p: f64| -> f64 {
        let mut acc = 0.0;
        for (el, geo) in mesh.elements.iter().zip(&geos) {
            let g = fem::p1_gradient(geo, [field[el[0]], field[el[1]], field[el[2]]]);
            acc += geo.area * la::norm(g).powf(p);
        }
        acc
    };

    let mut sup_rate_sq = 0.0_f64;
    let mut sup_pressure_grad_sq = 0.0_f64;
    let mut rate_grad_integral = 0.0;
    let mut damping_integral = 0.0;
    let n_levels = traj.u.len();
    for n in 0..n_levels {
        sup_rate_sq = sup_rate_sq.max(l2_sq(&traj.ut[n]));
        sup_pressure_grad_sq = sup_pressure_grad_sq.max(grad_sq(&traj.u[n]));
        let weight = if n == 0 || n == n_levels - 1 { 0.5 } else { 1.0 };
        rate_grad_integral += weight * dt * grad_sq(&traj.ut[n]);
        damping_integral += weight * dt * grad_pow(&traj.ut[n], q + 1.0);
    }
    let data_norm_sq = l2_sq(&traj.ut[0]) + grad_sq(&traj.u[0]);
    let lhs = sup_rate_sq + sup_pressure_grad_sq + rate_grad_integral + damping_integral;
    EnergyReport {
        sup_rate_sq,
        sup_pressure_grad_sq,
        rate_grad_integral,
        damping_integral,
        data_norm_sq,
        ratio: if data_norm_sq > 0.0 { lhs / data_norm_sq } else { 0.0 },
    }
}
