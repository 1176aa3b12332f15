//! Run the descent loop on a shape-recovery problem: the target pressure
//! trajectory is produced by a circular lens, the initial guess is an
//! ellipse, and the loop deforms the interface to drive the tracking cost
//! down while keeping the mesh admissible.
//!
//! Run with `cargo run --release --example optimize_lens`.

use lensopt::config::RunConfig;
use lensopt::fem::Parallelism;
use lensopt::geometry::{build_mesh, LensShape};
use lensopt::optimizer::{optimize, resample_trajectory, OptimizerOptions};
use lensopt::state::{solve_state, TargetField, TimeGrid};

fn main() {
    let cfg = RunConfig::default();
    let domain = cfg.domain.rectangle();
    let h = 1.0 / 16.0;
    let grid = TimeGrid { t_end: 0.25, n_steps: 32 };
    let params = cfg.material_params();
    let bounds = cfg.diagnostics_bounds();
    let par = Parallelism::serial();
    let profile = cfg.initial.profile(&domain).expect("analytic profile");

    // Target data from the circular lens the loop should move toward.
    let goal = LensShape::Circle { center: [0.5, 0.5], radius: 0.2 };
    let goal_mesh = build_mesh(domain, &goal, h).expect("the goal shape fits");
    let g_u0 = goal_mesh.sample_scalar(&profile);
    let g_v0 = vec![0.0; goal_mesh.n_nodes()];
    let goal_traj = solve_state(&goal_mesh, &params, grid, &g_u0, &g_v0, &bounds, &par)
        .expect("the goal run stays non-degenerate");

    // Elliptic initial guess.
    let start = LensShape::Ellipse { center: [0.5, 0.5], semi_axes: [0.25, 0.16] };
    let mesh = build_mesh(domain, &start, h).expect("the starting shape fits");
    let u0 = mesh.sample_scalar(&profile);
    let v0 = vec![0.0; mesh.n_nodes()];
    let target = TargetField::trajectory(resample_trajectory(&goal_mesh, &goal_traj.u, &mesh));

    let options = OptimizerOptions { max_iterations: 6, ..OptimizerOptions::default() };
    let result = optimize(&mesh, &params, grid, &u0, &v0, &target, &bounds, &options, &par)
        .expect("the descent loop completes");

    println!("iter        cost    ‖h‖_H¹        step   min area   turn°  clearance");
    for r in &result.history {
        println!(
            "{:4}  {:.4e}  {:.3e}  {:10.3e}  {:.3e}  {:6.1}  {:9.3}",
            r.iteration,
            r.cost,
            r.gradient_norm,
            r.step,
            r.min_element_area,
            r.max_turning_angle_deg,
            r.boundary_clearance,
        );
    }
    let first = result.history.first().expect("history is never empty").cost;
    let last = result.final_cost();
    println!(
        "cost {first:.4e} → {last:.4e} ({:.1}% reduction, {})",
        100.0 * (1.0 - last / first),
        if result.converged { "converged" } else { "iteration budget reached" }
    );
    assert!(last < first, "the loop must make progress on the recovery problem");
    for pair in result.history.windows(2) {
        assert!(
            pair[1].cost <= pair[0].cost,
            "accepted steps never increase the cost: {} → {}",
            pair[0].cost,
            pair[1].cost
        );
    }
}
