//! Assemble the shape derivative of the tracking cost in its volume form
//! and check it against central difference quotients of actually deformed
//! meshes, for a few random smooth displacement fields.  Also evaluate the
//! interface form of the same derivative, which concentrates the
//! sensitivity on the lens boundary.
//!
//! The volume form is the derivative of the computed cost on this mesh, so
//! it matches the difference quotients to high accuracy at any resolution.
//! For a general volume field it also registers how the discrete solution
//! reacts to interior node motion; the interface form keeps only the
//! boundary-normal part, and the two approach each other under mesh
//! refinement for fields that move the interface.
//!
//! Run with `cargo run --release --example gradient_check`.

use lensopt::adjoint::solve_adjoint;
use lensopt::config::RunConfig;
use lensopt::fem::Parallelism;
use lensopt::geometry::{build_mesh, VelocityField};
use lensopt::shape::{eval_boundary_form, eval_volume_form, fd_oracle, ShapeGradientReport};
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
    let target = TargetField::constant(vec![0.0; mesh.n_nodes()]);
    let adj = solve_adjoint(&mesh, &params, &traj, &target, &bounds, &par)
        .expect("the backward sweep is solvable");

    for i in 0..2 {
        let field = VelocityField::smoothed_random(&mesh, cfg.seed + i, 1.0, 4);
        let volume = eval_volume_form(&mesh, &params, &traj, &adj, &target, &field)
            .expect("the volume form assembles");
        let boundary = eval_boundary_form(&mesh, &params, &traj, &adj, &field)
            .expect("the interface form assembles");
        let fd = fd_oracle(
            &mesh,
            &params,
            grid,
            &u0,
            &v0,
            &target,
            &bounds,
            &par,
            &field,
            &[1e-2, 5e-3, 2.5e-3],
        )
        .expect("the deformed costs evaluate");
        let report = ShapeGradientReport::new(volume, Some(boundary), Some(fd));
        println!("== field {i} ==");
        print!("{}", report.render());
        let dev = report.volume_vs_fd.expect("the comparison is present");
        assert!(
            dev <= 0.05,
            "the volume form must match the difference quotients: deviation {dev:.3e}"
        );
        println!();
    }
}
