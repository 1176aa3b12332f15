//! Descent loop deforming the lens to track a target pressure field.
//!
//! Each iteration solves the state and adjoint problems on the current
//! mesh, assembles the volume shape derivative as a nodal load vector, and
//! lifts it to a smooth displacement through the H¹ Riesz problem
//!
//!   (∇h_a, ∇φ) + (h_a, φ) = −ℓ_a(φ),    a ∈ {x, y},  h = 0 on ∂Ω,
//!
//! so that dJ(h) = −‖h‖²_{H¹} and h is a guaranteed descent direction.
//! The mesh then moves by τh under an Armijo backtracking line search that
//! also enforces geometric admissibility (no folded elements, interface
//! clearance and turning-angle bounds).  Nodal data (initial values and the
//! target) ride with the mesh nodes, which is exactly the convention the
//! volume derivative differentiates.

use std::time::Instant;

use thiserror::Error;

use crate::adjoint::{solve_adjoint, AdjointError};
use crate::fem::{self, CsrMatrix, IterativeFailure, Parallelism};
use crate::geometry::{check_admissible, perturb_mesh, transform_factors, Mesh2D, VelocityField};
use crate::la::{self, Vec2};
use crate::shape::{volume_gradient_data, ShapeError};
use crate::state::{
    evaluate_cost, solve_state, DiagnosticsBounds, MaterialParams, StateError, TargetField,
    TimeGrid,
};

/// Tuning knobs of the descent loop.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerOptions {
    /// Maximum accepted descent steps.
    pub max_iterations: usize,
    /// Convergence threshold on ‖h‖_{H¹}.
    pub gradient_tol: f64,
    /// Armijo sufficient-decrease slope c₁.
    pub armijo_slope: f64,
    /// Step halvings tolerated before the line search gives up.
    pub max_halvings: usize,
    /// Largest nodal displacement allowed per accepted step, as a fraction
    /// of the nominal mesh size.
    pub max_displacement: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tol: 1e-6,
            armijo_slope: 1e-4,
            max_halvings: 25,
            max_displacement: 0.5,
        }
    }
}

/// One row of the optimization history: the state of an iterate plus the
/// step that left it (zero in the final row).
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    /// Iterate index (0 = initial shape).
    pub iteration: usize,
    /// Tracking cost at this iterate.
    pub cost: f64,
    /// ‖h‖_{H¹} of the descent field at this iterate.
    pub gradient_norm: f64,
    /// Accepted step size leaving this iterate; 0 when none was taken.
    pub step: f64,
    /// Smallest element area of this iterate's mesh.
    pub min_element_area: f64,
    /// Largest interface turning angle of this iterate's mesh, degrees.
    pub max_turning_angle_deg: f64,
    /// Interface clearance from the outer boundary.
    pub boundary_clearance: f64,
    /// Wall-clock seconds spent on this iteration (excluded from any
    /// determinism comparison).
    pub wall_seconds: f64,
}

/// Outcome of the descent loop.
#[derive(Debug)]
pub struct OptimizationResult {
    /// Final mesh.
    pub mesh: Mesh2D,
    /// Per-iterate records, initial shape first.
    pub history: Vec<IterationRecord>,
    /// Whether ‖h‖_{H¹} dropped below the tolerance.
    pub converged: bool,
}

impl OptimizationResult {
    /// Cost at the final iterate.
    pub fn final_cost(&self) -> f64 {
        self.history.last().map(|r| r.cost).unwrap_or(f64::NAN)
    }
}

/// Descent-loop failures.
#[derive(Debug, Error)]
pub enum OptimizerError {
    /// No admissible decreasing step within the halving budget.
    #[error(
        "line search exhausted at iteration {iteration} after {halvings} halvings (cost {cost:.6e})"
    )]
    LineSearchExhausted {
        /// Iterate the search started from.
        iteration: usize,
        /// Halvings tried.
        halvings: usize,
        /// Cost at that iterate.
        cost: f64,
    },
    /// The H¹ Riesz solve failed.
    #[error("descent-field solve failed for component {component}: {source}")]
    RieszFailure {
        /// 0 = x, 1 = y.
        component: usize,
        /// Underlying conjugate-gradient failure.
        source: IterativeFailure,
    },
    /// State solve failed on the current (accepted) mesh.
    #[error(transparent)]
    State(#[from] StateError),
    /// Adjoint solve failed.
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    /// Shape-derivative evaluation failed.
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Lift nodal shape-derivative loads to an H¹ displacement field.
///
/// Solves (K + M) h_a = −ℓ_a per component with homogeneous Dirichlet
/// conditions on the outer boundary and returns the field together with
/// ‖h‖_{H¹} = √(−dJ(h)).
pub fn riesz_descent_field(
    mesh: &Mesh2D,
    loads: &[Vec2],
    bounds: &DiagnosticsBounds,
) -> Result<(VelocityField, f64), OptimizerError> {
    assert_eq!(loads.len(), mesh.n_nodes(), "load/mesh node mismatch");
    let geos = mesh.element_geometries();
    let mut matrix = CsrMatrix::from_elements(mesh.n_nodes(), &mesh.elements);
    let mut scratch = vec![0.0; mesh.n_nodes()];
    for (el, geo) in mesh.elements.iter().zip(&geos) {
        let k = fem::local_stiffness(geo, &la::IDENTITY);
        let m = fem::local_mass(geo.area, [1.0; 3]);
        let mut local = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                local[i][j] = k[i][j] + m[i][j];
            }
        }
        matrix.scatter(&mut scratch, *el, &local, &[0.0; 3]);
    }
    matrix.apply_dirichlet(&mesh.boundary_node);

    let mut values = vec![[0.0, 0.0]; mesh.n_nodes()];
    let mut norm_sq = 0.0;
    for component in 0..2 {
        let rhs: Vec<f64> = loads
            .iter()
            .zip(&mesh.boundary_node)
            .map(|(l, &b)| if b { 0.0 } else { -l[component] })
            .collect();
        let mut x = vec![0.0; mesh.n_nodes()];
        fem::conjugate_gradient(
            &matrix,
            &rhs,
            &mut x,
            bounds.linear_tol,
            bounds.max_linear_iterations,
        )
        .map_err(|source| OptimizerError::RieszFailure { component, source })?;
        // ‖h_a‖²_{H¹} = h_aᵀ(K+M)h_a = h_aᵀ rhs.
        norm_sq += fem::dot_slices(&x, &rhs);
        for (v, xi) in values.iter_mut().zip(&x) {
            v[component] = *xi;
        }
    }
    Ok((VelocityField { values }, norm_sq.max(0.0).sqrt()))
}

/// Transfer a nodal trajectory between meshes covering the same domain by
/// P1 interpolation at the destination's node positions.  Used once, up
/// front, to freeze a target generated on a different (target-shape) mesh.
pub fn resample_trajectory(
    source: &Mesh2D,
    levels: &[Vec<f64>],
    dest: &Mesh2D,
) -> Vec<Vec<f64>> {
    let locations: Vec<(usize, [f64; 3])> =
        dest.nodes.iter().map(|&p| source.locate(p)).collect();
    levels
        .iter()
        .map(|level| {
            locations
                .iter()
                .map(|(e, w)| {
                    let el = &source.elements[*e];
                    (0..3).map(|i| w[i] * level[el[i]]).sum()
                })
                .collect()
        })
        .collect()
}

/// Run the descent loop from `mesh` until the H¹ gradient norm drops below
/// tolerance, the iteration budget is spent, or the line search fails.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    mesh: &Mesh2D,
    params: &MaterialParams,
    grid: TimeGrid,
    u0: &[f64],
    v0: &[f64],
    target: &TargetField,
    bounds: &DiagnosticsBounds,
    options: &OptimizerOptions,
    par: &Parallelism,
) -> Result<OptimizationResult, OptimizerError> {
    assert!(
        target.quadrature_values.is_none(),
        "the descent loop requires a nodal target so it can ride with the mesh"
    );
    let mut mesh = mesh.clone();
    let mut traj = solve_state(&mesh, params, grid, u0, v0, bounds, par)?;
    let mut cost = evaluate_cost(&mesh, &traj, target)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut warm_step: Option<f64> = None;

    for iteration in 0..=options.max_iterations {
        let started = Instant::now();
        let adjoint = solve_adjoint(&mesh, params, &traj, target, bounds, par)?;
        let data = volume_gradient_data(&mesh, params, &traj, &adjoint, target, par)?;
        let (h, gradient_norm) = riesz_descent_field(&mesh, &data.node_loads, bounds)?;
        let admissibility = check_admissible(&mesh);

        let mut record = IterationRecord {
            iteration,
            cost,
            gradient_norm,
            step: 0.0,
            min_element_area: admissibility.min_element_area,
            max_turning_angle_deg: admissibility.max_turning_angle_deg,
            boundary_clearance: admissibility.boundary_clearance,
            wall_seconds: 0.0,
        };

        if gradient_norm <= options.gradient_tol || iteration == options.max_iterations {
            converged = gradient_norm <= options.gradient_tol;
            record.wall_seconds = started.elapsed().as_secs_f64();
            history.push(record);
            break;
        }

        // dJ(h) = −‖h‖²; Armijo asks for a fixed fraction of that decrease.
        let directional = -gradient_norm * gradient_norm;
        // First trial step: warm-started from the last accepted step, or
        // the curvature-free scale J/‖h‖² that would zero the linear cost
        // model; capped so no element Jacobian leaves the invertible range
        // and no node moves more than a mesh-cell fraction at once.
        let fold_cap = transform_factors(&mesh, &h, 1.0)
            .map(|r| {
                if r.max_gradient_norm > 0.0 {
                    0.5 / r.max_gradient_norm
                } else {
                    f64::INFINITY
                }
            })
            .unwrap_or(f64::INFINITY);
        let max_h = h.max_norm();
        let displacement_cap = if max_h > 0.0 {
            options.max_displacement * mesh.mesh_size / max_h
        } else {
            f64::INFINITY
        };
        let scale = match warm_step {
            Some(prev) => 2.0 * prev,
            None => cost / (gradient_norm * gradient_norm),
        };
        let mut tau = scale.min(fold_cap).min(displacement_cap);
        if !tau.is_finite() || tau <= 0.0 {
            tau = mesh.mesh_size;
        }
        let mut halvings = 0;
        let accepted = loop {
            let trial = match perturb_mesh(&mesh, &h, tau) {
                Ok(m) => m,
                Err(_) => {
                    halvings += 1;
                    if halvings > options.max_halvings {
                        break None;
                    }
                    tau *= 0.5;
                    continue;
                }
            };
            let trial_ok = check_admissible(&trial).admissible;
            let solved = if trial_ok {
                solve_state(&trial, params, grid, u0, v0, bounds, par).ok()
            } else {
                None
            };
            if let Some(trial_traj) = solved {
                let trial_cost = evaluate_cost(&trial, &trial_traj, target)?;
                if trial_cost <= cost + options.armijo_slope * tau * directional {
                    break Some((trial, trial_traj, trial_cost));
                }
            }
            halvings += 1;
            if halvings > options.max_halvings {
                break None;
            }
            tau *= 0.5;
        };

        let Some((next_mesh, next_traj, next_cost)) = accepted else {
            return Err(OptimizerError::LineSearchExhausted { iteration, halvings, cost });
        };
        record.step = tau;
        record.wall_seconds = started.elapsed().as_secs_f64();
        history.push(record);
        warm_step = Some(tau);
        mesh = next_mesh;
        traj = next_traj;
        cost = next_cost;
    }

    Ok(OptimizationResult { mesh, history, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, Domain, LensShape};
    use crate::state::SubdomainParams;

    fn params() -> MaterialParams {
        MaterialParams {
            lens: SubdomainParams {
                bulk_modulus: 2.0,
                nonlinearity: 0.15,
                mass_density: 1.0,
                diffusivity: 0.05,
                damping_mix: 0.5,
            },
            fluid: SubdomainParams {
                bulk_modulus: 1.0,
                nonlinearity: 0.3,
                mass_density: 1.0,
                diffusivity: 0.05,
                damping_mix: 0.5,
            },
            exponent: 3.0,
            regularization: 1e-8,
        }
    }

    fn initial_pressure(mesh: &Mesh2D) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        mesh.sample_scalar(|p| 0.1 * (pi * p[0]).sin() * (pi * p[1]).sin())
    }

    #[test]
    fn riesz_field_is_a_descent_direction_vanishing_on_the_boundary() {
        let lens = LensShape::Circle { center: [0.5, 0.5], radius: 0.2 };
        let mesh = build_mesh(Domain::unit_square(), &lens, 1.0 / 8.0).unwrap();
        let mut loads = vec![[0.0, 0.0]; mesh.n_nodes()];
        for (i, l) in loads.iter_mut().enumerate() {
            let x = mesh.nodes[i];
            l[0] = (3.1 * x[0] + 1.7 * x[1]).sin();
            l[1] = (2.3 * x[0] - 0.9 * x[1]).cos();
        }
        let (h, norm) = riesz_descent_field(&mesh, &loads, &DiagnosticsBounds::default()).unwrap();
        for (i, &b) in mesh.boundary_node.iter().enumerate() {
            if b {
                assert_eq!(h.values[i], [0.0, 0.0], "descent field must fix the outer boundary");
            }
        }
        // dJ(h) = Σ h·ℓ must equal −‖h‖² to solver accuracy.
        let dj: f64 = h.values.iter().zip(&loads).map(|(a, l)| la::dot(*a, *l)).sum();
        assert!(
            (dj + norm * norm).abs() <= 1e-8 * norm * norm,
            "dJ(h) = {dj} vs −‖h‖² = {}",
            -norm * norm
        );
        assert!(norm > 0.0);
    }

    #[test]
    fn resampling_between_identical_meshes_is_the_identity() {
        let lens = LensShape::Circle { center: [0.5, 0.5], radius: 0.2 };
        let mesh = build_mesh(Domain::unit_square(), &lens, 1.0 / 8.0).unwrap();
        let levels: Vec<Vec<f64>> = (0..3)
            .map(|n| {
                mesh.sample_scalar(|p| (1.0 + n as f64) * p[0] * p[1] + 0.3 * (p[0] - p[1]))
            })
            .collect();
        let back = resample_trajectory(&mesh, &levels, &mesh);
        for (a, b) in levels.iter().zip(&back) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "resampling moved {x} to {y}");
            }
        }
    }

    #[test]
    fn starting_at_the_target_shape_converges_immediately_with_zero_cost() {
        let lens = LensShape::Circle { center: [0.5, 0.5], radius: 0.2 };
        let mesh = build_mesh(Domain::unit_square(), &lens, 1.0 / 8.0).unwrap();
        let pr = params();
        let grid = TimeGrid::new(0.1, 8);
        let u0 = initial_pressure(&mesh);
        let v0 = vec![0.0; mesh.n_nodes()];
        let bounds = DiagnosticsBounds::default();
        let par = Parallelism::serial();
        let traj = solve_state(&mesh, &pr, grid, &u0, &v0, &bounds, &par).unwrap();
        let target = TargetField::trajectory(traj.u.clone());
        let result = optimize(
            &mesh,
            &pr,
            grid,
            &u0,
            &v0,
            &target,
            &bounds,
            &OptimizerOptions::default(),
            &par,
        )
        .unwrap();
        assert!(result.converged, "same shape must already be optimal");
        assert_eq!(result.history.len(), 1, "no steps should be taken");
        assert_eq!(result.history[0].cost, 0.0, "identical mesh must give an exact zero cost");
        assert_eq!(result.history[0].step, 0.0);
    }

    #[test]
    fn descent_reduces_the_cost_monotonically() {
        let domain = Domain::unit_square();
        let target_lens = LensShape::Circle { center: [0.5, 0.5], radius: 0.2 };
        let start_lens = LensShape::Ellipse {
            center: [0.5, 0.5],
            semi_axes: [0.26, 0.15],
        };
        let h = 1.0 / 10.0;
        let target_mesh = build_mesh(domain, &target_lens, h).unwrap();
        let mesh = build_mesh(domain, &start_lens, h).unwrap();
        let pr = params();
        // Long enough for the wave to traverse the lens and make the two
        // shapes distinguishable in the tracking window.
        let grid = TimeGrid::new(0.3, 24);
        let bounds = DiagnosticsBounds::default();
        let par = Parallelism::serial();

        // Target trajectory generated on the target-shape mesh, frozen
        // nodally on the optimization mesh.
        let u0_t = initial_pressure(&target_mesh);
        let v0_t = vec![0.0; target_mesh.n_nodes()];
        let target_traj =
            solve_state(&target_mesh, &pr, grid, &u0_t, &v0_t, &bounds, &par).unwrap();
        let target = TargetField::trajectory(resample_trajectory(
            &target_mesh,
            &target_traj.u,
            &mesh,
        ));

        let u0 = initial_pressure(&mesh);
        let v0 = vec![0.0; mesh.n_nodes()];
        let options = OptimizerOptions { max_iterations: 5, ..OptimizerOptions::default() };
        let result = optimize(
            &mesh, &pr, grid, &u0, &v0, &target, &bounds, &options, &par,
        )
        .unwrap();
        let costs: Vec<f64> = result.history.iter().map(|r| r.cost).collect();
        assert!(costs.len() >= 2, "at least one step should be accepted: {costs:?}");
        for w in costs.windows(2) {
            assert!(w[1] <= w[0], "cost must not increase: {costs:?}");
        }
        assert!(
            costs.last().unwrap() < &(0.9 * costs[0]),
            "five iterations should cut the cost noticeably: {costs:?}"
        );
        for r in &result.history {
            assert!(r.min_element_area > 0.0, "accepted meshes must stay unfolded");
        }
    }

    #[test]
    fn impossible_decrease_exhausts_the_line_search() {
        let lens = LensShape::Circle { center: [0.5, 0.5], radius: 0.2 };
        let mesh = build_mesh(Domain::unit_square(), &lens, 1.0 / 8.0).unwrap();
        let pr = params();
        let grid = TimeGrid::new(0.2, 16);
        let u0 = initial_pressure(&mesh);
        let v0 = vec![0.0; mesh.n_nodes()];
        let bounds = DiagnosticsBounds::default();
        let par = Parallelism::serial();
        // A genuine misfit so the gradient is nonzero, with an Armijo slope
        // above 1: no step can beat the demanded decrease.
        let target = TargetField::constant(vec![0.0; mesh.n_nodes()]);
        let options = OptimizerOptions {
            armijo_slope: 5.0,
            max_halvings: 4,
            ..OptimizerOptions::default()
        };
        let err = optimize(
            &mesh, &pr, grid, &u0, &v0, &target, &bounds, &options, &par,
        )
        .unwrap_err();
        assert!(
            matches!(err, OptimizerError::LineSearchExhausted { iteration: 0, halvings: 5, .. }),
            "expected exhaustion, got {err:?}"
        );
    }
}
