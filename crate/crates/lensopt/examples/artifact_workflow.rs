//! Walk the artifact pipeline end to end: solve a small forward problem,
//! export the trajectory and snapshots, reimport them bit-exactly, and
//! fingerprint the run in a manifest the way every command-line run does.
//!
//! Run with `cargo run --example artifact_workflow`.

use lensopt::config::RunConfig;
use lensopt::fem::Parallelism;
use lensopt::geometry::build_mesh;
use lensopt::io::{
    export_field, export_trajectory, fnv1a_hash, import_trajectory, read_manifest,
    write_manifest, FieldFormat, FieldValues,
};
use lensopt::state::solve_state;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.domain.mesh_size = 1.0 / 8.0;
    cfg.time.t_end = 0.1;
    cfg.time.steps = 8;
    let dir = std::env::temp_dir().join("lensopt_artifact_workflow");
    std::fs::create_dir_all(&dir).expect("temp directory");

    let domain = cfg.domain.rectangle();
    let mesh = build_mesh(domain, &cfg.domain.lens.to_shape(), cfg.domain.mesh_size)
        .expect("the reference lens fits");
    let profile = cfg.initial.profile(&domain).expect("analytic profile");
    let u0 = mesh.sample_scalar(&profile);
    let v0 = vec![0.0; mesh.n_nodes()];
    let traj = solve_state(
        &mesh,
        &cfg.material_params(),
        cfg.time_grid(),
        &u0,
        &v0,
        &cfg.diagnostics_bounds(),
        &Parallelism::serial(),
    )
    .expect("the small run stays non-degenerate");

    // Trajectory CSV that reimports bit-exactly.
    let traj_path = dir.join("trajectory.csv");
    export_trajectory(&traj_path, &traj.u, &traj.ut).expect("export");
    let back = import_trajectory(&traj_path).expect("reimport");
    let exact = traj
        .u
        .iter()
        .flatten()
        .zip(back.u.iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("trajectory.csv: {} levels, bit-exact reimport: {exact}", back.u.len());
    assert!(exact, "text export must not lose precision");

    // Snapshot exports in both formats.
    let csv = export_field(
        &dir,
        "pressure",
        &mesh,
        FieldValues::Scalar(&traj.u),
        FieldFormat::Csv,
        &[0, 4, 8],
    )
    .expect("CSV export");
    let vtk = export_field(
        &dir,
        "pressure",
        &mesh,
        FieldValues::Scalar(&traj.u),
        FieldFormat::VtkLegacy,
        &[0, 4, 8],
    )
    .expect("VTK export");
    println!("field exports: {} CSV file(s), {} VTK snapshot(s)", csv.len(), vtk.len());

    // Manifest with the configuration fingerprint.
    let artifacts: Vec<String> = vec!["trajectory.csv".into(), "pressure.csv".into()];
    write_manifest(&dir, &cfg, "solve", 0.0, &artifacts).expect("manifest");
    let manifest = read_manifest(&dir.join("manifest.toml")).expect("reread");
    let expected = format!("fnv1a64:{:016x}", fnv1a_hash(cfg.to_toml().as_bytes()));
    println!("manifest: command = {}, config hash = {}", manifest.command, manifest.config_hash);
    assert_eq!(manifest.config_hash, expected, "the fingerprint is reproducible");
    println!("artifacts in {}", dir.display());
}
