//! Command-line surface: argument parsing, run orchestration, artifact
//! writing, and the verification suite.
//!
//! Five subcommands cover the toolkit: `solve` (forward problem), `adjoint`
//! (forward plus backward problem), `gradient` (shape-gradient assembly and
//! its verification report), `verify` (the oracle and invariant suite), and
//! `optimize` (the descent loop).  Every run reads one configuration file
//! (`--config`, defaults documented in the config module), writes its
//! artifacts into one directory (`--output` overrides the configured one),
//! and caps worker threads with `--threads`.  A manifest with a
//! configuration fingerprint accompanies every successful run; failures
//! leave a machine-readable `error.toml` and a nonzero exit status instead.
//!
//! Artifact bytes depend only on the configuration and seed: wall-clock
//! times stay confined to the manifest, and element loops reduce in index
//! order, so rerunning a command at any `--threads` value reproduces every
//! CSV identically.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adjoint::{solve_adjoint, AdjointError, AdjointTrajectory};
use crate::config::{self, ConfigError, InitialConfig, RunConfig, TargetConfig};
use crate::fem::Parallelism;
use crate::geometry::{
    build_mesh, transform_factors, write_mesh, GeometryError, Mesh2D, VelocityField,
};
use crate::io::{self, FieldFormat, FieldValues, IoError};
use crate::kernels::{
    flux, flux_representation_residual, inequality_slacks, young_constant,
    young_constant_search, RegularizedNorm,
};
use crate::la;
use crate::optimizer::{optimize, resample_trajectory, OptimizerError};
use crate::shape::{volume_gradient_data, ShapeError, ShapeGradientReport};
use crate::state::{
    degeneracy_margin, energy_report, evaluate_cost, solve_state, DiagnosticsBounds,
    MaterialParams, StateError, StateTrajectory, TargetField, TimeGrid,
};

/// Shape optimization of an acoustic lens in a nonlinearly damped
/// pressure-wave model.
#[derive(Debug, Parser)]
#[command(name = "lensopt", version)]
pub struct Cli {
    /// Subcommand to run.
    #[command(subcommand)]
    pub command: Command,
}

/// The available run modes.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the forward problem and export the pressure trajectory.
    Solve(RunArgs),
    /// Solve the forward and the backward problem; export both.
    Adjoint(RunArgs),
    /// Assemble the shape gradient and its verification report.
    Gradient(RunArgs),
    /// Run the oracle and invariant suite; nonzero exit on any failure.
    Verify(RunArgs),
    /// Run the descent loop; export the history and final mesh.
    Optimize(RunArgs),
}

impl Command {
    /// The subcommand name as typed on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Adjoint(_) => "adjoint",
            Command::Gradient(_) => "gradient",
            Command::Verify(_) => "verify",
            Command::Optimize(_) => "optimize",
        }
    }

    /// The shared flags.
    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Solve(a)
            | Command::Adjoint(a)
            | Command::Gradient(a)
            | Command::Verify(a)
            | Command::Optimize(a) => a,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration file (TOML); the documented defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Artifact directory, overriding the configured one.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Worker threads for element loops (1 = serial).
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Anything a run can fail with, preserving the failing module's record.
#[derive(Debug, Error)]
pub enum CliError {
    /// Configuration loading or validation failed.
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Mesh construction or deformation failed.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// The forward solver failed.
    #[error(transparent)]
    State(#[from] StateError),
    /// The backward solver failed.
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    /// Shape-gradient assembly failed.
    #[error(transparent)]
    Shape(#[from] ShapeError),
    /// The descent loop failed.
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    /// Reading or writing an artifact failed.
    #[error(transparent)]
    Artifact(#[from] IoError),
    /// Inputs are mutually inconsistent.
    #[error("{0}")]
    Setup(String),
    /// One or more verification checks failed.
    #[error("verification failed: {failed} of {total} checks")]
    VerificationFailed {
        /// Failing checks.
        failed: usize,
        /// Checks run.
        total: usize,
    },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Geometry(_) => "geometry",
            CliError::State(_) => "state",
            CliError::Adjoint(_) => "adjoint",
            CliError::Shape(_) => "shape",
            CliError::Optimizer(_) => "optimizer",
            CliError::Artifact(_) => "io",
            CliError::Setup(_) => "setup",
            CliError::VerificationFailed { .. } => "verification",
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    command: &'a str,
    kind: &'a str,
    message: String,
    detail: String,
}

/// Largest relative deviation between the assembled gradient and the
/// Richardson-extrapolated difference quotient that `verify` accepts.
const VERIFY_GRADIENT_BOUND: f64 = 0.05;

/// Run one parsed invocation; returns the process exit status.
pub fn run(cli: &Cli) -> u8 {
    let command = cli.command.name();
    let args = cli.command.args();
    let started = Instant::now();
    let cfg = match load_config(args) {
        Ok(cfg) => cfg,
        Err(err) => {
            let dir = args.output.clone().unwrap_or_else(|| PathBuf::from("out"));
            return fail(&dir, command, &err);
        }
    };
    let outdir = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    if let Err(source) = std::fs::create_dir_all(&outdir) {
        let err = CliError::Artifact(IoError::Io {
            path: outdir.display().to_string(),
            source,
        });
        return fail(&outdir, command, &err);
    }
    let par = Parallelism::new(args.threads.unwrap_or(1));
    let result = match &cli.command {
        Command::Solve(_) => run_solve(&cfg, &outdir, &par),
        Command::Adjoint(_) => run_adjoint(&cfg, &outdir, &par),
        Command::Gradient(_) => run_gradient(&cfg, &outdir, &par),
        Command::Verify(_) => run_verify(&cfg, &outdir, &par),
        Command::Optimize(_) => run_optimize(&cfg, &outdir, &par),
    };
    match result {
        Ok(artifacts) => {
            let wall = started.elapsed().as_secs_f64();
            match io::write_manifest(&outdir, &cfg, command, wall, &artifacts) {
                Ok(_) => {
                    println!(
                        "{command}: wrote {} artifacts to {}",
                        artifacts.len(),
                        outdir.display()
                    );
                    0
                }
                Err(err) => fail(&outdir, command, &CliError::Artifact(err)),
            }
        }
        Err(err) => fail(&outdir, command, &err),
    }
}

/// Report a failure on stderr, drop a machine-readable record, exit 1.
fn fail(outdir: &Path, command: &str, err: &CliError) -> u8 {
    eprintln!("{command}: {err}");
    let record = ErrorRecord {
        command,
        kind: err.kind(),
        message: err.to_string(),
        detail: format!("{err:?}"),
    };
    let _ = std::fs::create_dir_all(outdir);
    if let Ok(text) = toml::to_string_pretty(&record) {
        let _ = std::fs::write(outdir.join("error.toml"), text);
    }
    1
}

fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    match &args.config {
        Some(path) => Ok(config::parse_config(path)?),
        None => Ok(RunConfig::default()),
    }
}

/// Everything a run needs after configuration: mesh, data, and targets.
struct Workspace {
    mesh: Mesh2D,
    params: MaterialParams,
    grid: TimeGrid,
    bounds: DiagnosticsBounds,
    u0: Vec<f64>,
    v0: Vec<f64>,
    target: TargetField,
}

fn prepare(cfg: &RunConfig, par: &Parallelism) -> Result<Workspace, CliError> {
    let domain = cfg.domain.rectangle();
    let mesh = build_mesh(domain, &cfg.domain.lens.to_shape(), cfg.domain.mesh_size)?;
    let params = cfg.material_params();
    let grid = cfg.time_grid();
    let bounds = cfg.diagnostics_bounds();
    let u0 = match cfg.initial.profile(&domain) {
        Some(f) => mesh.sample_scalar(&f),
        None => {
            let InitialConfig::Imported { path } = &cfg.initial else {
                unreachable!("only imported initial data lacks a profile")
            };
            let values = io::import_nodal_field(Path::new(path))?;
            if values.len() != mesh.n_nodes() {
                return Err(CliError::Setup(format!(
                    "initial field has {} nodes, the mesh has {}",
                    values.len(),
                    mesh.n_nodes()
                )));
            }
            values
        }
    };
    let v0 = vec![0.0; mesh.n_nodes()];
    let target = match &cfg.target {
        TargetConfig::Zero => TargetField::constant(vec![0.0; mesh.n_nodes()]),
        TargetConfig::FromShape { lens } => {
            let target_mesh = build_mesh(domain, &lens.to_shape(), cfg.domain.mesh_size)?;
            let Some(f) = cfg.initial.profile(&domain) else {
                return Err(CliError::Setup(
                    "a generated target needs an analytic initial profile, \
                     not an imported field"
                        .to_string(),
                ));
            };
            let t_u0 = target_mesh.sample_scalar(&f);
            let t_v0 = vec![0.0; target_mesh.n_nodes()];
            let traj = solve_state(&target_mesh, &params, grid, &t_u0, &t_v0, &bounds, par)?;
            TargetField::trajectory(resample_trajectory(&target_mesh, &traj.u, &mesh))
        }
        TargetConfig::Imported { path } => {
            let imported = io::import_trajectory(Path::new(path))?;
            if imported.u[0].len() != mesh.n_nodes() {
                return Err(CliError::Setup(format!(
                    "target trajectory has {} nodes per level, the mesh has {}",
                    imported.u[0].len(),
                    mesh.n_nodes()
                )));
            }
            if imported.u.len() != grid.n_steps + 1 {
                return Err(CliError::Setup(format!(
                    "target trajectory has {} levels, the grid has {}",
                    imported.u.len(),
                    grid.n_steps + 1
                )));
            }
            TargetField::trajectory(imported.u)
        }
    };
    Ok(Workspace { mesh, params, grid, bounds, u0, v0, target })
}

/// Evenly spaced snapshot steps over `0..=n_steps`, endpoints included.
fn snapshot_steps(n_steps: usize, count: usize) -> Vec<usize> {
    match count {
        0 => Vec::new(),
        1 => vec![n_steps],
        _ => {
            let mut steps: Vec<usize> =
                (0..count).map(|i| i * n_steps / (count - 1)).collect();
            steps.dedup();
            steps
        }
    }
}

fn write_text_artifact(outdir: &Path, name: &str, text: &str) -> Result<String, CliError> {
    std::fs::write(outdir.join(name), text).map_err(|source| {
        CliError::Artifact(IoError::Io {
            path: outdir.join(name).display().to_string(),
            source,
        })
    })?;
    Ok(name.to_string())
}

fn relative_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect()
}

fn diagnostics_text(
    ws: &Workspace,
    traj: &StateTrajectory,
    cost: f64,
) -> String {
    let deg = degeneracy_margin(&ws.mesh, &ws.params, traj);
    let en = energy_report(&ws.mesh, &ws.params, traj);
    let mut out = String::new();
    out.push_str("forward solve diagnostics\n");
    out.push_str(&format!(
        "  mesh: {} nodes, {} elements, size {}\n",
        ws.mesh.n_nodes(),
        ws.mesh.elements.len(),
        ws.mesh.mesh_size
    ));
    out.push_str(&format!(
        "  time: {} steps to T = {}, dt = {}\n",
        ws.grid.n_steps,
        ws.grid.t_end,
        ws.grid.dt()
    ));
    out.push_str(&format!("  tracking cost J = {cost}\n"));
    out.push_str(&format!(
        "  degeneracy: a0 = {}, factor range [{}, {}], floor {}\n",
        deg.a0, deg.min_factor, deg.max_factor, ws.bounds.degeneracy_floor
    ));
    out.push_str(&format!(
        "  energy: sup‖u̇‖² = {}, sup‖∇u‖² = {}, ∫‖∇u̇‖² = {}, damping ∫ = {}, \
         data = {}, ratio = {}\n",
        en.sup_rate_sq,
        en.sup_pressure_grad_sq,
        en.rate_grad_integral,
        en.damping_integral,
        en.data_norm_sq,
        en.ratio
    ));
    out
}

fn run_solve(
    cfg: &RunConfig,
    outdir: &Path,
    par: &Parallelism,
) -> Result<Vec<String>, CliError> {
    let ws = prepare(cfg, par)?;
    let traj = solve_state(&ws.mesh, &ws.params, ws.grid, &ws.u0, &ws.v0, &ws.bounds, par)?;
    let cost = evaluate_cost(&ws.mesh, &traj, &ws.target)?;
    let mut artifacts = Vec::new();
    let all: Vec<usize> = (0..traj.u.len()).collect();
    let written = io::export_field(
        outdir,
        "state_u",
        &ws.mesh,
        FieldValues::Scalar(&traj.u),
        FieldFormat::Csv,
        &all,
    )?;
    artifacts.extend(relative_names(&written));
    let written = io::export_field(
        outdir,
        "state_u",
        &ws.mesh,
        FieldValues::Scalar(&traj.u),
        FieldFormat::VtkLegacy,
        &snapshot_steps(ws.grid.n_steps, cfg.output.snapshots),
    )?;
    artifacts.extend(relative_names(&written));
    io::export_trajectory(&outdir.join("trajectory.csv"), &traj.u, &traj.ut)?;
    artifacts.push("trajectory.csv".to_string());
    artifacts.push(write_text_artifact(
        outdir,
        "diagnostics.txt",
        &diagnostics_text(&ws, &traj, cost),
    )?);
    Ok(artifacts)
}

fn run_adjoint(
    cfg: &RunConfig,
    outdir: &Path,
    par: &Parallelism,
) -> Result<Vec<String>, CliError> {
    let ws = prepare(cfg, par)?;
    let traj = solve_state(&ws.mesh, &ws.params, ws.grid, &ws.u0, &ws.v0, &ws.bounds, par)?;
    let adj = solve_adjoint(&ws.mesh, &ws.params, &traj, &ws.target, &ws.bounds, par)?;
    let mut artifacts = Vec::new();
    let all: Vec<usize> = (0..adj.p.len()).collect();
    let written = io::export_field(
        outdir,
        "adjoint_p",
        &ws.mesh,
        FieldValues::Scalar(&adj.p),
        FieldFormat::Csv,
        &all,
    )?;
    artifacts.extend(relative_names(&written));
    let written = io::export_field(
        outdir,
        "adjoint_p",
        &ws.mesh,
        FieldValues::Scalar(&adj.p),
        FieldFormat::VtkLegacy,
        &snapshot_steps(ws.grid.n_steps, cfg.output.snapshots),
    )?;
    artifacts.extend(relative_names(&written));
    io::export_trajectory(&outdir.join("adjoint_trajectory.csv"), &adj.p, &adj.pt)?;
    artifacts.push("adjoint_trajectory.csv".to_string());
    Ok(artifacts)
}

/// Gradient data plus the per-field verification reports of one run.
struct GradientComputation {
    traj: StateTrajectory,
    adj: AdjointTrajectory,
    loads: Vec<la::Vec2>,
    reports: Vec<ShapeGradientReport>,
}

fn gradient_fields(cfg: &RunConfig, mesh: &Mesh2D) -> Result<Vec<VelocityField>, CliError> {
    if let Some(path) = &cfg.gradient.field_file {
        let values = io::import_vector_field(Path::new(path))?;
        if values.len() != mesh.n_nodes() {
            return Err(CliError::Setup(format!(
                "displacement field has {} nodes, the mesh has {}",
                values.len(),
                mesh.n_nodes()
            )));
        }
        return Ok(vec![VelocityField { values }]);
    }
    Ok((0..cfg.gradient.fd_fields)
        .map(|i| {
            VelocityField::smoothed_random(
                mesh,
                cfg.seed + i as u64,
                cfg.gradient.field_amplitude,
                cfg.gradient.smoothing_passes,
            )
        })
        .collect())
}

fn compute_gradient(
    cfg: &RunConfig,
    ws: &Workspace,
    par: &Parallelism,
) -> Result<GradientComputation, CliError> {
    if !cfg.gradient.enabled {
        return Err(CliError::Setup(
            "the gradient is disabled in the configuration".to_string(),
        ));
    }
    let traj = solve_state(&ws.mesh, &ws.params, ws.grid, &ws.u0, &ws.v0, &ws.bounds, par)?;
    let adj = solve_adjoint(&ws.mesh, &ws.params, &traj, &ws.target, &ws.bounds, par)?;
    let data = volume_gradient_data(&ws.mesh, &ws.params, &traj, &adj, &ws.target, par)?;
    let fields = gradient_fields(cfg, &ws.mesh)?;
    let with_boundary = cfg.gradient.boundary_form && !ws.mesh.interface_edges.is_empty();
    let mut reports = Vec::with_capacity(fields.len());
    for field in &fields {
        let volume = crate::shape::eval_volume_form(
            &ws.mesh, &ws.params, &traj, &adj, &ws.target, field,
        )?;
        let boundary = if with_boundary {
            Some(crate::shape::eval_boundary_form(&ws.mesh, &ws.params, &traj, &adj, field)?)
        } else {
            None
        };
        let fd = if cfg.gradient.fd_check {
            Some(crate::shape::fd_oracle(
                &ws.mesh,
                &ws.params,
                ws.grid,
                &ws.u0,
                &ws.v0,
                &ws.target,
                &ws.bounds,
                par,
                field,
                &cfg.gradient.fd_taus,
            )?)
        } else {
            None
        };
        reports.push(ShapeGradientReport::new(volume, boundary, fd));
    }
    Ok(GradientComputation { traj, adj, loads: data.node_loads, reports })
}

fn export_gradient_artifacts(
    comp: &GradientComputation,
    mesh: &Mesh2D,
    outdir: &Path,
) -> Result<Vec<String>, CliError> {
    let mut artifacts = Vec::new();
    let loads_series = vec![comp.loads.clone()];
    let written = io::export_field(
        outdir,
        "gradient_loads",
        mesh,
        FieldValues::Vector(&loads_series),
        FieldFormat::Csv,
        &[0],
    )?;
    artifacts.extend(relative_names(&written));
    for (i, report) in comp.reports.iter().enumerate() {
        artifacts.push(write_text_artifact(
            outdir,
            &format!("gradient_report_{i}.txt"),
            &report.render(),
        )?);
        if let Some(fd) = &report.fd {
            let name = format!("fd_slopes_{i}.csv");
            io::export_fd_slopes(&outdir.join(&name), fd)?;
            artifacts.push(name);
        }
    }
    let final_step = comp.traj.u.len() - 1;
    let written = io::export_field(
        outdir,
        "state_final",
        mesh,
        FieldValues::Scalar(&comp.traj.u),
        FieldFormat::Csv,
        &[final_step],
    )?;
    artifacts.extend(relative_names(&written));
    let written = io::export_field(
        outdir,
        "adjoint_initial",
        mesh,
        FieldValues::Scalar(&comp.adj.p),
        FieldFormat::Csv,
        &[0],
    )?;
    artifacts.extend(relative_names(&written));
    Ok(artifacts)
}

fn run_gradient(
    cfg: &RunConfig,
    outdir: &Path,
    par: &Parallelism,
) -> Result<Vec<String>, CliError> {
    let ws = prepare(cfg, par)?;
    let comp = compute_gradient(cfg, &ws, par)?;
    for (i, report) in comp.reports.iter().enumerate() {
        let fd = report
            .volume_vs_fd
            .map_or(String::new(), |d| format!(", vs differences {d:.3e}"));
        println!("field {i}: volume form {}{fd}", report.volume.total);
    }
    export_gradient_artifacts(&comp, &ws.mesh, outdir)
}

/// One verification suite outcome.
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Distance from the chord x–y to the origin.
fn chord_origin_distance(x: la::Vec2, y: la::Vec2) -> f64 {
    let chord = la::sub(x, y);
    let len2 = la::dot(chord, chord);
    if len2 == 0.0 {
        return la::norm(x);
    }
    let t = (-la::dot(y, chord) / len2).clamp(0.0, 1.0);
    la::norm(la::axpy(y, t, chord))
}

fn check_representation(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e97);
    let exact = RegularizedNorm::exact();
    let mut max_rel = 0.0_f64;
    for &q in &[2.5, 3.0, 4.0] {
        let mut checked = 0;
        while checked < 200 {
            let x: la::Vec2 = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let y: la::Vec2 = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            // Fixed-order quadrature under-resolves chords passing near
            // the branch point at the origin; keep a proportional margin.
            if chord_origin_distance(x, y) < 0.15 * la::norm(la::sub(x, y)) + 0.05 {
                continue;
            }
            let res = flux_representation_residual(x, y, q, exact, 64);
            let scale =
                (la::norm(flux(x, q, exact)) + la::norm(flux(y, q, exact)) + 1.0).max(1.0);
            max_rel = max_rel.max(res / scale);
            checked += 1;
        }
    }
    check(
        "flux representation formula",
        max_rel <= 1e-8,
        format!("max scaled residual {max_rel:.3e} over 600 pairs"),
    )
}

fn check_monotonicity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xab0d);
    let mut worst = f64::INFINITY;
    for &q in &[1.0, 2.0, 3.0, 4.0] {
        for _ in 0..2500 {
            let x: la::Vec2 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let y: la::Vec2 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let s = inequality_slacks(x, y, q, 0.0);
            let scale = la::norm(la::sub(x, y)).powf(q + 1.0).max(1.0);
            worst = worst.min(s.monotonicity_gap / scale);
        }
        // Antipodal pairs attain the constant: equality up to roundoff.
        let x: la::Vec2 = [rng.gen_range(0.2..2.0), rng.gen_range(-2.0..-0.2)];
        let s = inequality_slacks(x, la::scale(-1.0, x), q, 0.0);
        let scale = la::norm(la::scale(2.0, x)).powf(q + 1.0);
        if s.monotonicity_gap.abs() > 1e-12 * scale {
            return check(
                "flux monotonicity",
                false,
                format!("antipodal equality violated at q = {q}: gap {}", s.monotonicity_gap),
            );
        }
    }
    check(
        "flux monotonicity",
        worst >= -1e-12,
        format!("worst normalized gap {worst:.3e} over 10000 pairs"),
    )
}

fn check_young(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70c4);
    let mut max_dev = 0.0_f64;
    for _ in 0..20 {
        let eps = rng.gen_range(1e-2..10.0);
        let r = rng.gen_range(1.3..4.0);
        let c = young_constant(eps, r);
        let dev = (c - young_constant_search(eps, r)).abs() / (1.0 + c);
        max_dev = max_dev.max(dev);
    }
    check(
        "product-splitting constant",
        max_dev <= 1e-8,
        format!("max deviation from the 1D maximization {max_dev:.3e} over 20 pairs"),
    )
}

fn check_transforms(mesh: &Mesh2D, seed: u64) -> Result<Check, CliError> {
    let mut h = VelocityField::smoothed_random(mesh, seed ^ 0x7a25, 1.0, 2);
    // Normalize to unit displacement gradient so the difference-quotient
    // error keeps an O(1) constant.
    let probe = transform_factors(mesh, &h, 0.0)?;
    if probe.max_gradient_norm > 0.0 {
        for v in &mut h.values {
            *v = la::scale(1.0 / probe.max_gradient_norm, *v);
        }
    }
    let tau = 1e-4;
    let plus = transform_factors(mesh, &h, tau)?;
    let minus = transform_factors(mesh, &h, -tau)?;
    let mut max_res = 0.0_f64;
    for (e, dh) in plus.displacement_gradients.iter().enumerate() {
        let di =
            (plus.elements[e].volume_factor - minus.elements[e].volume_factor) / (2.0 * tau);
        max_res = max_res.max((di - (dh[0][0] + dh[1][1])).abs());
        let dh_t = la::transpose(dh);
        for r in 0..2 {
            for c in 0..2 {
                let da = (plus.elements[e].gradient_transform[r][c]
                    - minus.elements[e].gradient_transform[r][c])
                    / (2.0 * tau);
                max_res = max_res.max((da + dh_t[r][c]).abs());
            }
        }
    }
    Ok(check(
        "deformation factor derivatives",
        max_res <= 1e-6,
        format!("max central-difference residual {max_res:.3e} at τ = {tau}"),
    ))
}

fn check_monitors(ws: &Workspace, traj: &StateTrajectory) -> Check {
    let deg = degeneracy_margin(&ws.mesh, &ws.params, traj);
    let en = energy_report(&ws.mesh, &ws.params, traj);
    let passed = deg.consistent()
        && deg.min_factor > ws.bounds.degeneracy_floor
        && en.ratio.is_finite()
        && en.ratio >= 0.0;
    check(
        "degeneracy and energy monitors",
        passed,
        format!(
            "min(1−2ku) = {}, a0 = {}, energy ratio = {}",
            deg.min_factor, deg.a0, en.ratio
        ),
    )
}

fn check_annihilation(
    ws: &Workspace,
    traj: &StateTrajectory,
    seed: u64,
    par: &Parallelism,
) -> Result<Check, CliError> {
    let matched = TargetField::trajectory(traj.u.clone());
    let adj = solve_adjoint(&ws.mesh, &ws.params, traj, &matched, &ws.bounds, par)?;
    let u_scale = traj
        .u
        .iter()
        .map(|level| crate::fem::norm_inf(level))
        .fold(0.0, f64::max);
    let p_max = adj
        .p
        .iter()
        .map(|level| crate::fem::norm_inf(level))
        .fold(0.0, f64::max);
    let data = volume_gradient_data(&ws.mesh, &ws.params, traj, &adj, &matched, par)?;
    let mut dj_max = 0.0_f64;
    for i in 0..2 {
        let field = VelocityField::smoothed_random(&ws.mesh, seed ^ (0x3d + i), 1.0, 3);
        dj_max = dj_max.max(data.evaluate(&field).abs());
    }
    let passed = p_max <= 1e-10 * u_scale.max(1e-300) && dj_max <= 1e-8;
    Ok(check(
        "matched-target annihilation",
        passed,
        format!("sup|p| = {p_max:.3e} (data scale {u_scale:.3e}), max |dJ·h| = {dj_max:.3e}"),
    ))
}

fn check_gradient(
    cfg: &RunConfig,
    ws: &Workspace,
    outdir: &Path,
    par: &Parallelism,
) -> Result<(Check, Vec<String>), CliError> {
    if !cfg.gradient.enabled || !cfg.gradient.fd_check {
        return Ok((
            check(
                "gradient against difference quotients",
                true,
                "skipped: disabled in the configuration".to_string(),
            ),
            Vec::new(),
        ));
    }
    let comp = compute_gradient(cfg, ws, par)?;
    let artifacts = export_gradient_artifacts(&comp, &ws.mesh, outdir)?;
    let mut max_dev = 0.0_f64;
    let mut details = Vec::new();
    for report in &comp.reports {
        let dev = report.volume_vs_fd.expect("fd_check produces the comparison");
        max_dev = max_dev.max(dev);
        details.push(format!("{dev:.3e}"));
    }
    Ok((
        check(
            "gradient against difference quotients",
            max_dev <= VERIFY_GRADIENT_BOUND,
            format!(
                "relative deviations [{}], bound {VERIFY_GRADIENT_BOUND}",
                details.join(", ")
            ),
        ),
        artifacts,
    ))
}

fn check_config_round_trip(cfg: &RunConfig) -> Check {
    match config::parse_config_str(&cfg.to_toml()) {
        Ok(back) if back == *cfg => check(
            "configuration round trip",
            true,
            "parse ∘ serialize is the identity".to_string(),
        ),
        Ok(_) => check(
            "configuration round trip",
            false,
            "reparsed configuration differs".to_string(),
        ),
        Err(err) => check("configuration round trip", false, format!("reparse failed: {err}")),
    }
}

fn run_verify(
    cfg: &RunConfig,
    outdir: &Path,
    par: &Parallelism,
) -> Result<Vec<String>, CliError> {
    let mut artifacts = Vec::new();
    let mut checks = Vec::new();
    checks.push(check_representation(cfg.seed));
    checks.push(check_monotonicity(cfg.seed));
    checks.push(check_young(cfg.seed));
    let ws = prepare(cfg, par)?;
    checks.push(check_transforms(&ws.mesh, cfg.seed)?);
    let traj = solve_state(&ws.mesh, &ws.params, ws.grid, &ws.u0, &ws.v0, &ws.bounds, par)?;
    checks.push(check_monitors(&ws, &traj));
    checks.push(check_annihilation(&ws, &traj, cfg.seed, par)?);
    let (grad_check, grad_artifacts) = check_gradient(cfg, &ws, outdir, par)?;
    checks.push(grad_check);
    artifacts.extend(grad_artifacts);
    checks.push(check_config_round_trip(cfg));

    let mut summary = String::new();
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        if !c.passed {
            failed += 1;
        }
        let line = format!("{verdict}  {}: {}", c.name, c.detail);
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
    }
    summary.push_str(&format!("{} of {} checks passed\n", checks.len() - failed, checks.len()));
    artifacts.push(write_text_artifact(outdir, "verify_summary.txt", &summary)?);
    if failed == 0 {
        Ok(artifacts)
    } else {
        Err(CliError::VerificationFailed { failed, total: checks.len() })
    }
}

fn run_optimize(
    cfg: &RunConfig,
    outdir: &Path,
    par: &Parallelism,
) -> Result<Vec<String>, CliError> {
    let ws = prepare(cfg, par)?;
    let result = optimize(
        &ws.mesh,
        &ws.params,
        ws.grid,
        &ws.u0,
        &ws.v0,
        &ws.target,
        &ws.bounds,
        &cfg.optimizer_options(),
        par,
    )?;
    let mut artifacts = Vec::new();
    io::export_history(&outdir.join("history.csv"), &result.history)?;
    artifacts.push("history.csv".to_string());
    for (name, mesh) in [("initial_mesh.txt", &ws.mesh), ("final_mesh.txt", &result.mesh)] {
        let mut bytes = Vec::new();
        write_mesh(mesh, &mut bytes)?;
        artifacts.push(write_text_artifact(
            outdir,
            name,
            &String::from_utf8(bytes).expect("mesh text is ASCII"),
        )?);
    }
    let traj = solve_state(
        &result.mesh, &ws.params, ws.grid, &ws.u0, &ws.v0, &ws.bounds, par,
    )?;
    let written = io::export_field(
        outdir,
        "state_final",
        &result.mesh,
        FieldValues::Scalar(&traj.u),
        FieldFormat::VtkLegacy,
        &[ws.grid.n_steps],
    )?;
    artifacts.extend(relative_names(&written));
    let first = result.history.first().expect("history is never empty").cost;
    let last = result.final_cost();
    println!(
        "optimize: J {first} → {last} over {} accepted steps ({})",
        result.history.len() - 1,
        if result.converged { "converged" } else { "budget exhausted" }
    );
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LensConfig;

    /// A configuration small enough for test-speed end-to-end runs.
    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.domain.mesh_size = 1.0 / 8.0;
        cfg.time = crate::config::TimeConfig { t_end: 0.1, steps: 8 };
        cfg.gradient.fd_taus = vec![2e-2, 1e-2];
        cfg.gradient.fd_fields = 1;
        cfg.output.snapshots = 2;
        cfg
    }

    fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, cfg.to_toml()).unwrap();
        path
    }

    #[test]
    fn arguments_parse_into_subcommands_and_flags() {
        let cli = Cli::try_parse_from([
            "lensopt", "solve", "--config", "c.toml", "--output", "dir", "--threads", "2",
        ])
        .unwrap();
        assert_eq!(cli.command.name(), "solve");
        let args = cli.command.args();
        assert_eq!(args.config.as_deref(), Some(Path::new("c.toml")));
        assert_eq!(args.output.as_deref(), Some(Path::new("dir")));
        assert_eq!(args.threads, Some(2));
        for name in ["adjoint", "gradient", "verify", "optimize"] {
            let cli = Cli::try_parse_from(["lensopt", name]).unwrap();
            assert_eq!(cli.command.name(), name);
        }
        assert!(
            Cli::try_parse_from(["lensopt", "simulate"]).is_err(),
            "unknown subcommands must be rejected"
        );
    }

    #[test]
    fn snapshot_steps_are_even_and_include_the_ends() {
        assert_eq!(snapshot_steps(64, 3), vec![0, 32, 64]);
        assert_eq!(snapshot_steps(64, 1), vec![64]);
        assert_eq!(snapshot_steps(64, 0), Vec::<usize>::new());
        assert_eq!(snapshot_steps(2, 5), vec![0, 1, 2], "duplicates collapse");
    }

    #[test]
    fn zero_displacement_file_yields_an_all_zero_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        let mesh = build_mesh(
            cfg.domain.rectangle(),
            &cfg.domain.lens.to_shape(),
            cfg.domain.mesh_size,
        )
        .unwrap();
        let zeros = vec![vec![[0.0, 0.0]; mesh.n_nodes()]];
        let files = io::export_field(
            dir.path(),
            "h",
            &mesh,
            FieldValues::Vector(&zeros),
            FieldFormat::Csv,
            &[0],
        )
        .unwrap();
        cfg.gradient.field_file = Some(files[0].display().to_string());
        let par = Parallelism::serial();
        let ws = prepare(&cfg, &par).unwrap();
        let comp = compute_gradient(&cfg, &ws, &par).unwrap();
        assert_eq!(comp.reports.len(), 1, "one report for the imported field");
        let report = &comp.reports[0];
        assert_eq!(report.volume.total, 0.0, "volume form of h = 0 is exactly zero");
        assert_eq!(report.boundary.as_ref().unwrap().total, 0.0);
        let fd = report.fd.as_ref().unwrap();
        assert_eq!(fd.richardson, 0.0, "an undeformed mesh reproduces its cost exactly");
        assert_eq!(report.volume_vs_fd, Some(0.0));
    }

    #[test]
    fn degeneracy_breach_leaves_a_machine_readable_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.initial = InitialConfig::Standing { amplitude: 1.9 };
        let config_path = write_config(dir.path(), &cfg);
        let out = dir.path().join("artifacts");
        let cli = Cli::try_parse_from([
            "lensopt",
            "solve",
            "--config",
            config_path.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(run(&cli), 1, "a degeneracy breach must exit nonzero");
        let record = std::fs::read_to_string(out.join("error.toml")).unwrap();
        assert!(record.contains("DegeneracyBreach"), "record must name the failure:\n{record}");
        assert!(record.contains("step"), "record must name the time step:\n{record}");
        assert!(record.contains("kind = \"state\""), "{record}");
    }

    #[test]
    fn solve_writes_the_artifact_set_with_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.time.steps = 4;
        cfg.time.t_end = 0.05;
        let config_path = write_config(dir.path(), &cfg);
        let out = dir.path().join("artifacts");
        let cli = Cli::try_parse_from([
            "lensopt",
            "solve",
            "--config",
            config_path.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(run(&cli), 0, "the small solve must succeed");
        let manifest = io::read_manifest(&out.join("manifest.toml")).unwrap();
        assert_eq!(manifest.command, "solve");
        for name in ["state_u.csv", "trajectory.csv", "diagnostics.txt", "state_u_000000.vtk",
            "state_u_000004.vtk"]
        {
            assert!(
                manifest.artifacts.iter().any(|a| a == name),
                "manifest must list {name}: {:?}",
                manifest.artifacts
            );
            assert!(out.join(name).is_file(), "{name} must exist");
        }
        let reparsed = config::parse_config(&out.join("config.toml")).unwrap();
        assert_eq!(reparsed, cfg, "the manifest's sibling config reproduces the input");
    }

    #[test]
    fn matched_shape_target_gives_exactly_zero_cost() {
        let mut cfg = small_config();
        cfg.target = TargetConfig::FromShape { lens: cfg.domain.lens.clone() };
        let par = Parallelism::serial();
        let ws = prepare(&cfg, &par).unwrap();
        let traj =
            solve_state(&ws.mesh, &ws.params, ws.grid, &ws.u0, &ws.v0, &ws.bounds, &par)
                .unwrap();
        let cost = evaluate_cost(&ws.mesh, &traj, &ws.target).unwrap();
        assert_eq!(cost, 0.0, "a target generated at the current shape matches exactly");
    }

    #[test]
    fn ellipse_lens_configs_build_their_mesh() {
        let mut cfg = small_config();
        cfg.domain.lens =
            LensConfig::Ellipse { center: [0.5, 0.5], semi_axes: [0.25, 0.15] };
        let par = Parallelism::serial();
        let ws = prepare(&cfg, &par).unwrap();
        assert!(!ws.mesh.interface_edges.is_empty(), "the ellipse produces an interface");
    }
}
