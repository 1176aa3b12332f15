//! Solve the backward-in-time sensitivity problem driven by the tracking
//! misfit, and confirm the exact annihilation property: when the target
//! equals the computed pressure, the misfit source vanishes and the
//! sensitivity is identically zero, as is every shape directional
//! derivative built from it.
//!
//! Run with `cargo run --release --example adjoint_sensitivity`.

use lensopt::adjoint::solve_adjoint;
use lensopt::config::RunConfig;
use lensopt::fem::{norm_inf, Parallelism};
use lensopt::geometry::{build_mesh, VelocityField};
use lensopt::shape::volume_gradient_data;
use lensopt::state::{solve_state, TargetField};

fn main() {
    let cfg = RunConfig::default();
    let domain = cfg.domain.rectangle();
    let mesh = build_mesh(domain, &cfg.domain.lens.to_shape(), cfg.domain.mesh_size)
        .expect("the reference lens fits the unit square");
    let params = cfg.material_params();
    let grid = cfg.time_grid();
    let profile = cfg.initial.profile(&domain).expect("analytic profile");
    let u0 = mesh.sample_scalar(&profile);
    let v0 = vec![0.0; mesh.n_nodes()];
    let bounds = cfg.diagnostics_bounds();
    let par = Parallelism::serial();

    let traj = solve_state(&mesh, &params, grid, &u0, &v0, &bounds, &par)
        .expect("the reference run stays non-degenerate");

    // Genuine misfit: the zero target leaves the full pressure as source.
    let zero_target = TargetField::constant(vec![0.0; mesh.n_nodes()]);
    let adj = solve_adjoint(&mesh, &params, &traj, &zero_target, &bounds, &par)
        .expect("the backward sweep is solvable");
    let p_max = adj.p.iter().map(|l| norm_inf(l)).fold(0.0, f64::max);
    let u_max = traj.u.iter().map(|l| norm_inf(l)).fold(0.0, f64::max);
    println!("zero target:    sup|u| = {u_max:.4e}, sup|p| = {p_max:.4e}");

    // Matched target: the source is exactly zero, so the sweep returns the
    // zero trajectory and every directional derivative vanishes.
    let matched = TargetField::trajectory(traj.u.clone());
    let adj0 = solve_adjoint(&mesh, &params, &traj, &matched, &bounds, &par)
        .expect("the trivial backward sweep is solvable");
    let p0_max = adj0.p.iter().map(|l| norm_inf(l)).fold(0.0, f64::max);
    let data = volume_gradient_data(&mesh, &params, &traj, &adj0, &matched, &par)
        .expect("gradient data assembles");
    let field = VelocityField::smoothed_random(&mesh, cfg.seed, 1.0, 3);
    let dj = data.evaluate(&field);
    println!("matched target: sup|p| = {p0_max:.4e}, dJ·h = {dj:.4e}");
    assert!(
        p0_max <= 1e-10 * u_max,
        "a matched target annihilates the sensitivity: sup|p| = {p0_max:.3e}"
    );
    assert!(dj.abs() <= 1e-8, "and with it every directional derivative: {dj:.3e}");
}
