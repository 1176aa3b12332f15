//! Backward-in-time adjoint solver for the tracking cost.
//!
//! The adjoint state p of J = ∫∫ (u − u_d)² satisfies, weakly, with
//! terminal conditions p(T) = ṗ(T) = 0,
//!
//!   ∫∫ (1/λ)(1 − 2ku) p̈ ζ + (1/ϱ) ∇p·∇ζ − b(1−δ) ∇ṗ·∇ζ
//!        − bδ (G_{∇u̇}(∇p))˙·∇ζ  =  ∫∫ 2(u − u_d) ζ,
//!
//! where G_g(Y) = |g|^{q-1} Y + (q−1)|g|^{q-3}(g·Y) g is the symmetric
//! linearization of the damping flux.  All zeroth-order couplings of the
//! linearized state operator cancel under time integration by parts, so the
//! equation above is the exact adjoint and p is linear in the misfit.
//!
//! The solver substitutes p̃(t̃) = p(T − t̃) and marches the resulting
//! forward system with the same implicit midpoint scheme as the state.
//! With Z = |∇u̇|^{q-1}, W = |∇u̇|^{q-3} and overdots denoting forward-time
//! derivatives of the state coefficients, the damping terms become
//!
//!   + b(1−δ) ∇p̃̇·∇ζ + bδ (Z ∇p̃̇ − Ż ∇p̃)·∇ζ
//!   − bδ(q−1) (Ẇ (∇p̃·g) g − W (∇p̃̇·g) g + W (∇p̃·∇ü) g + W (∇p̃·g) ∇ü)·∇ζ,
//!
//! all coefficients sampled at the reversed midpoint from the two matching
//! forward state levels: averages for g, ∇ü, and the mass weight, exact
//! centered differences of the Z and W level series for Ż and Ẇ.  Each step
//! is one symmetric linear solve.

use thiserror::Error;

use crate::fem::{self, CsrMatrix, IterativeFailure, Parallelism};
use crate::geometry::Mesh2D;
use crate::kernels::RegularizedNorm;
use crate::la::{self, Mat2, Vec2};
use crate::state::{
    self, DiagnosticsBounds, ElementContext, LocalSystem, MaterialParams, StateError,
    StateTrajectory, TargetField, TimeGrid,
};

/// Adjoint solver failures.
#[derive(Debug, Error)]
pub enum AdjointError {
    /// The linear step solve did not converge.
    #[error("adjoint linear solve failed at step {step}: {source}")]
    LinearSolveFailure {
        /// Reversed time step at which the solve stalled.
        step: usize,
        /// Underlying Krylov failure.
        source: IterativeFailure,
    },
    /// The state trajectory does not match the mesh or is incomplete.
    #[error("state data missing or mismatched: expected {expected} {what}, got {got}")]
    StateMissing {
        /// What was compared.
        what: &'static str,
        /// Expected count.
        expected: usize,
        /// Actual count.
        got: usize,
    },
    /// |∇u̇|^{q-3} is unbounded at a vanishing gradient for q < 3 without
    /// regularization; the solver refuses to continue.
    #[error("adjoint linearization singular at step {step}, element {element}: |∇u̇| = 0 with q < 3 and ε = 0")]
    SingularLinearization {
        /// Reversed time step.
        step: usize,
        /// Element with the vanishing rate gradient.
        element: usize,
    },
    /// Target field incompatible with the trajectory.
    #[error(transparent)]
    Grid(#[from] StateError),
}

/// Adjoint trajectory in forward-time indexing: `p[n]` lives at the same
/// time level as the state's `u[n]`; `pt` is the forward-time derivative ṗ.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    /// Time grid shared with the state.
    pub grid: TimeGrid,
    /// Adjoint pressure p per time level; `p[N]` is exactly zero.
    pub p: Vec<Vec<f64>>,
    /// Forward-time rate ṗ per level; `pt[N]` is exactly zero.
    pub pt: Vec<Vec<f64>>,
}

impl AdjointTrajectory {
    /// Number of nodes per time level.
    pub fn n_nodes(&self) -> usize {
        self.p[0].len()
    }
}

/// Coefficient matrices of one adjoint midpoint step on one element:
/// the flux of the reversed equation is C_p ∇p̃_mid + C_r ∇p̃̇_mid.
struct StepTensors {
    c_p: Mat2,
    c_r: Mat2,
    /// Mass weights (1/λ)(1 − 2k u*) at the three edge midpoints.
    mass: [f64; 3],
    /// Load 2(u* − u_d*) at the three edge midpoints.
    load: [f64; 3],
}

/// |g|^{q-3} with the singular contract: errors when unregularized at a
/// vanishing gradient for q < 3 (q = 1 never reaches here).
fn w_factor(g: Vec2, q: f64, reg: RegularizedNorm) -> Result<f64, ()> {
    if reg.epsilon == 0.0 && q < 3.0 && g == [0.0, 0.0] {
        return Err(());
    }
    Ok(reg.pow(g, q - 3.0))
}

#[allow(clippy::too_many_arguments)]
fn step_tensors(
    ctx: &ElementContext,
    e: usize,
    traj: &StateTrajectory,
    target: &TargetField,
    hi: usize,
    lo: usize,
    dt: f64,
    q: f64,
    reg: RegularizedNorm,
) -> Result<StepTensors, usize> {
    let s = &ctx.sub;
    let idx = ctx.nodes;
    let local = |field: &[Vec<f64>], l: usize| -> [f64; 3] {
        [field[l][idx[0]], field[l][idx[1]], field[l][idx[2]]]
    };
    let avg = |a: [f64; 3], b: [f64; 3]| -> [f64; 3] {
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]
    };

    let u_star = avg(local(&traj.u, hi), local(&traj.u, lo));
    let um = fem::midpoint_values(u_star);
    let g_hi = fem::p1_gradient(&ctx.geo, local(&traj.ut, hi));
    let g_lo = fem::p1_gradient(&ctx.geo, local(&traj.ut, lo));
    let g = la::scale(0.5, la::add(g_hi, g_lo));
    let g_acc = la::scale(
        0.5,
        la::add(
            fem::p1_gradient(&ctx.geo, local(&traj.utt, hi)),
            fem::p1_gradient(&ctx.geo, local(&traj.utt, lo)),
        ),
    );

    let inv_l = 1.0 / s.bulk_modulus;
    let k = s.nonlinearity;
    let inv_rho = 1.0 / s.mass_density;
    let b_lin = s.diffusivity * (1.0 - s.damping_mix);
    let b_q = s.diffusivity * s.damping_mix;

    let z_star = reg.pow(g, q - 1.0);
    let z_dot = (reg.pow(g_hi, q - 1.0) - reg.pow(g_lo, q - 1.0)) / dt;

    let mut c_p = [[inv_rho - b_q * z_dot, 0.0], [0.0, inv_rho - b_q * z_dot]];
    let iso_r = b_lin + b_q * z_star;
    let mut c_r = [[iso_r, 0.0], [0.0, iso_r]];
    if b_q != 0.0 && q != 1.0 {
        let w_star = w_factor(g, q, reg).map_err(|()| e)?;
        let w_dot =
            (w_factor(g_hi, q, reg).map_err(|()| e)? - w_factor(g_lo, q, reg).map_err(|()| e)?) / dt;
        let gg = la::outer(g, g);
        c_r = la::mat_axpy(&c_r, b_q * (q - 1.0) * w_star, &gg);
        c_p = la::mat_axpy(&c_p, -b_q * (q - 1.0) * w_dot, &gg);
        let cross = la::mat_axpy(&la::outer(g, g_acc), 1.0, &la::outer(g_acc, g));
        c_p = la::mat_axpy(&c_p, -b_q * (q - 1.0) * w_star, &cross);
    }

    let dm_hi = target.midpoints_at(hi, e, &idx);
    let dm_lo = target.midpoints_at(lo, e, &idx);
    let mut mass = [0.0; 3];
    let mut load = [0.0; 3];
    for m in 0..3 {
        mass[m] = inv_l * (1.0 - 2.0 * k * um[m]);
        load[m] = 2.0 * (um[m] - 0.5 * (dm_hi[m] + dm_lo[m]));
    }
    Ok(StepTensors { c_p, c_r, mass, load })
}

/// Assemble the local systems of one reversed midpoint step: the unknown is
/// y = p̃̇^{n+1}, and each element contributes the step matrix
/// S = (mass/dt) φφ + ((dt/4) C_p + ½ C_r) ∇φ∇φ and the right-hand side
/// (load − residual at y = 0).
#[allow(clippy::too_many_arguments)]
fn assemble_adjoint_step(
    contexts: &[ElementContext],
    traj: &StateTrajectory,
    target: &TargetField,
    step: usize,
    dt: f64,
    q: f64,
    reg: RegularizedNorm,
    p_prev: &[f64],
    r_prev: &[f64],
    par: &Parallelism,
) -> Result<Vec<LocalSystem>, AdjointError> {
    let n_levels = traj.u.len();
    let hi = n_levels - 1 - step;
    let lo = hi - 1;
    let results = par.map(contexts.len(), |e| -> Result<LocalSystem, usize> {
        let ctx = &contexts[e];
        let t = step_tensors(ctx, e, traj, target, hi, lo, dt, q, reg)?;
        let idx = ctx.nodes;
        let mut p_mid = [0.0; 3];
        let mut r_mid = [0.0; 3];
        let mut accel = [0.0; 3];
        for i in 0..3 {
            let gi = idx[i];
            p_mid[i] = p_prev[gi] + 0.25 * dt * r_prev[gi];
            r_mid[i] = 0.5 * r_prev[gi];
            accel[i] = -r_prev[gi] / dt;
        }
        let am = fem::midpoint_values(accel);
        let g_p = fem::p1_gradient(&ctx.geo, p_mid);
        let g_r = fem::p1_gradient(&ctx.geo, r_mid);

        // rhs = load − R(0).
        let weights = [
            t.load[0] - t.mass[0] * am[0],
            t.load[1] - t.mass[1] * am[1],
            t.load[2] - t.mass[2] * am[2],
        ];
        let mut rhs = fem::local_load(ctx.geo.area, weights);
        let flux0 = la::add(la::matvec(&t.c_p, g_p), la::matvec(&t.c_r, g_r));
        for i in 0..3 {
            rhs[i] -= ctx.geo.area * la::dot(flux0, ctx.geo.grad[i]);
        }

        let mass_w = [t.mass[0] / dt, t.mass[1] / dt, t.mass[2] / dt];
        let mut s = fem::local_mass(ctx.geo.area, mass_w);
        let tensor = la::mat_axpy(
            &la::mat_axpy(&[[0.0; 2]; 2], 0.25 * dt, &t.c_p),
            0.5,
            &t.c_r,
        );
        let s_grad = fem::local_stiffness(&ctx.geo, &tensor);
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += s_grad[i][j];
            }
        }
        Ok(LocalSystem { r: rhs, j: s })
    });
    let mut locals = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(l) => locals.push(l),
            Err(element) => {
                return Err(AdjointError::SingularLinearization { step, element })
            }
        }
    }
    Ok(locals)
}

/// Solve the adjoint equation backward from p(T) = ṗ(T) = 0.
///
/// The trajectory must come from the same mesh; its grid is reused.  The
/// result is forward-indexed.
pub fn solve_adjoint(
    mesh: &Mesh2D,
    params: &MaterialParams,
    traj: &StateTrajectory,
    target: &TargetField,
    bounds: &DiagnosticsBounds,
    par: &Parallelism,
) -> Result<AdjointTrajectory, AdjointError> {
    let n_nodes = mesh.n_nodes();
    if traj.n_nodes() != n_nodes {
        return Err(AdjointError::StateMissing {
            what: "nodes in the state trajectory",
            expected: n_nodes,
            got: traj.n_nodes(),
        });
    }
    let n_levels = traj.u.len();
    if n_levels != traj.grid.n_steps + 1 || traj.ut.len() != n_levels || traj.utt.len() != n_levels
    {
        return Err(AdjointError::StateMissing {
            what: "time levels in the state trajectory",
            expected: traj.grid.n_steps + 1,
            got: n_levels.min(traj.ut.len()).min(traj.utt.len()),
        });
    }
    target.check(n_levels, n_nodes)?;

    let contexts = state::element_contexts(mesh, params);
    let q = params.exponent;
    let reg = params.norm();
    let dt = traj.grid.dt();
    let boundary = &mesh.boundary_node;
    let n_steps = traj.grid.n_steps;

    let mut matrix = CsrMatrix::from_elements(n_nodes, &mesh.elements);
    let mut rhs = vec![0.0; n_nodes];

    // Reversed-time levels of p̃ and p̃̇.
    let mut p_rev = Vec::with_capacity(n_levels);
    let mut r_rev = Vec::with_capacity(n_levels);
    p_rev.push(vec![0.0; n_nodes]);
    r_rev.push(vec![0.0; n_nodes]);

    for step in 0..n_steps {
        let p_prev = p_rev[step].clone();
        let r_prev = r_rev[step].clone();
        let locals = assemble_adjoint_step(
            &contexts, traj, target, step, dt, q, reg, &p_prev, &r_prev, par,
        )?;
        state::scatter_step(&locals, &contexts, boundary, &mut matrix, &mut rhs);
        let mut y = r_prev.clone();
        if fem::bicgstab(&matrix, &rhs, &mut y, bounds.linear_tol, bounds.max_linear_iterations)
            .is_err()
        {
            // The step matrix is symmetric but can turn indefinite on stiff
            // coefficient transients, where BiCGSTAB may break down; MINRES
            // handles the symmetric indefinite case.
            y.copy_from_slice(&r_prev);
            fem::minres(&matrix, &rhs, &mut y, bounds.linear_tol, 10 * bounds.max_linear_iterations)
                .map_err(|source| AdjointError::LinearSolveFailure { step, source })?;
        }
        for (yi, &b) in y.iter_mut().zip(boundary) {
            if b {
                *yi = 0.0;
            }
        }
        let mut p_next = p_prev;
        for i in 0..n_nodes {
            p_next[i] += 0.5 * dt * (r_prev[i] + y[i]);
        }
        p_rev.push(p_next);
        r_rev.push(y);
    }

    // Convert to forward indexing: p[l] = p̃[N−l], ṗ[l] = −p̃̇[N−l].
    let mut p = Vec::with_capacity(n_levels);
    let mut pt = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        p.push(p_rev[n_steps - l].clone());
        pt.push(r_rev[n_steps - l].iter().map(|&x| -x).collect());
    }
    Ok(AdjointTrajectory { grid: traj.grid, p, pt })
}

/// Recorded magnitudes entering the smallness regime of the adjoint-based
/// gradient: advisory surrogates, not verified bounds.
#[derive(Debug, Clone, Copy)]
pub struct SmallnessReport {
    /// √J, the space-time misfit magnitude.
    pub tracking_misfit: f64,
    /// sup over levels and elements of |∇u̇|.
    pub sup_rate_grad: f64,
    /// sup over levels and elements of |∇p|.
    pub sup_adjoint_grad: f64,
    /// sup|∇u̇|^{q-1} · sup|∇p|, the size of the nonlinear damping coupling
    /// seen by the adjoint.
    pub coupling_surrogate: f64,
}

/// Compute the smallness surrogates of a state/adjoint pair.
pub fn smallness_report(
    mesh: &Mesh2D,
    params: &MaterialParams,
    traj: &StateTrajectory,
    adjoint: &AdjointTrajectory,
    target: &TargetField,
) -> SmallnessReport {
    let geos = mesh.element_geometries();
    let sup_grad = |levels: &[Vec<f64>]| -> f64 {
        let mut sup = 0.0_f64;
        for level in levels {
            for (el, geo) in mesh.elements.iter().zip(&geos) {
                let g = fem::p1_gradient(geo, [level[el[0]], level[el[1]], level[el[2]]]);
                sup = sup.max(la::norm(g));
            }
        }
        sup
    };
    let sup_rate_grad = sup_grad(&traj.ut);
    let sup_adjoint_grad = sup_grad(&adjoint.p);
    let misfit = crate::state::evaluate_cost(mesh, traj, target)
        .map(f64::sqrt)
        .unwrap_or(f64::NAN);
    SmallnessReport {
        tracking_misfit: misfit,
        sup_rate_grad,
        sup_adjoint_grad,
        coupling_surrogate: sup_rate_grad.powf(params.exponent - 1.0) * sup_adjoint_grad,
    }
}
