//! Artifact persistence: CSV and VTK field export, trajectory round
//! trips, optimizer history tables, and the run manifest.
//!
//! Formats are append-only text with `\n` line endings and floats in
//! shortest round-trip form, so identical inputs always produce identical
//! bytes and a parse of an exported file reproduces every value exactly.
//!
//! * nodal field / series CSV: header `node,x,y,step,value[,value_y]`,
//!   rows step-major, nodes ascending within a step;
//! * trajectory CSV: header `node,step,u,ut`, same ordering, both the
//!   pressure and its rate per row;
//! * VTK legacy ASCII: one unstructured-grid file per selected step with
//!   the material side as cell data and the field as point data;
//! * manifest: `manifest.toml` (command, config hash, package version,
//!   seed, wall time, artifact list) next to a full `config.toml`, enough
//!   to reproduce the run.  Wall times live only in the manifest, never
//!   in CSV artifacts, so repeated runs stay byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::geometry::{Mesh2D, SubdomainLabel};
use crate::la::Vec2;
use crate::optimizer::IterationRecord;
use crate::shape::FdOracle;

/// Artifact reading and writing failures.
#[derive(Debug, Error)]
pub enum IoError {
    /// The underlying filesystem operation failed.
    #[error("cannot access {path}: {source}")]
    Io {
        /// Offending path.
        path: String,
        /// Underlying error.
        source: std::io::Error,
    },
    /// A file exists but its content does not match the format.
    #[error("{path}:{line}: {message}")]
    Format {
        /// Offending path.
        path: String,
        /// 1-based line number.
        line: usize,
        /// What was wrong.
        message: String,
    },
    /// A step index points outside the exported series.
    #[error("step {step} outside the series of {levels} time levels")]
    StepOutOfRange {
        /// Requested step.
        step: usize,
        /// Available levels.
        levels: usize,
    },
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text)
        .map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path)
        .map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

/// FNV-1a 64-bit hash; stable, dependency-free fingerprint for manifests.
pub fn fnv1a_hash(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// A nodal time series to export: one value row per node per time level.
#[derive(Debug, Clone, Copy)]
pub enum FieldValues<'a> {
    /// Scalar per node.
    Scalar(&'a [Vec<f64>]),
    /// Two components per node.
    Vector(&'a [Vec<Vec2>]),
}

impl FieldValues<'_> {
    fn levels(&self) -> usize {
        match self {
            FieldValues::Scalar(s) => s.len(),
            FieldValues::Vector(s) => s.len(),
        }
    }
}

/// Export container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldFormat {
    /// One CSV file holding all selected steps.
    Csv,
    /// Legacy ASCII VTK, one file per selected step.
    VtkLegacy,
}

/// Write a nodal field series under `dir/name` and return the files
/// written.  CSV produces `name.csv`; VTK produces `name_NNNNNN.vtk` per
/// selected step.
pub fn export_field(
    dir: &Path,
    name: &str,
    mesh: &Mesh2D,
    values: FieldValues,
    format: FieldFormat,
    steps: &[usize],
) -> Result<Vec<PathBuf>, IoError> {
    let levels = values.levels();
    for &step in steps {
        if step >= levels {
            return Err(IoError::StepOutOfRange { step, levels });
        }
    }
    std::fs::create_dir_all(dir)
        .map_err(|source| IoError::Io { path: dir.display().to_string(), source })?;
    match format {
        FieldFormat::Csv => {
            let path = dir.join(format!("{name}.csv"));
            write_text(&path, &field_csv(mesh, values, steps))?;
            Ok(vec![path])
        }
        FieldFormat::VtkLegacy => {
            let mut written = Vec::with_capacity(steps.len());
            for &step in steps {
                let path = dir.join(format!("{name}_{step:06}.vtk"));
                write_text(&path, &vtk_snapshot(name, mesh, values, step))?;
                written.push(path);
            }
            Ok(written)
        }
    }
}

fn field_csv(mesh: &Mesh2D, values: FieldValues, steps: &[usize]) -> String {
    let mut out = String::new();
    match values {
        FieldValues::Scalar(series) => {
            out.push_str("node,x,y,step,value\n");
            for &step in steps {
                for (node, v) in series[step].iter().enumerate() {
                    let p = mesh.nodes[node];
                    let _ = writeln!(out, "{node},{},{},{step},{v}", p[0], p[1]);
                }
            }
        }
        FieldValues::Vector(series) => {
            out.push_str("node,x,y,step,value,value_y\n");
            for &step in steps {
                for (node, v) in series[step].iter().enumerate() {
                    let p = mesh.nodes[node];
                    let _ = writeln!(out, "{node},{},{},{step},{},{}", p[0], p[1], v[0], v[1]);
                }
            }
        }
    }
    out
}

fn vtk_snapshot(name: &str, mesh: &Mesh2D, values: FieldValues, step: usize) -> String {
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "{name} step {step}");
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(out, "POINTS {} double", mesh.n_nodes());
    for p in &mesh.nodes {
        let _ = writeln!(out, "{} {} 0", p[0], p[1]);
    }
    let m = mesh.elements.len();
    let _ = writeln!(out, "CELLS {m} {}", 4 * m);
    for el in &mesh.elements {
        let _ = writeln!(out, "3 {} {} {}", el[0], el[1], el[2]);
    }
    let _ = writeln!(out, "CELL_TYPES {m}");
    for _ in 0..m {
        out.push_str("5\n");
    }
    let _ = writeln!(out, "CELL_DATA {m}");
    out.push_str("SCALARS region int 1\nLOOKUP_TABLE default\n");
    for &label in &mesh.labels {
        out.push_str(if label == SubdomainLabel::Lens { "1\n" } else { "0\n" });
    }
    let _ = writeln!(out, "POINT_DATA {}", mesh.n_nodes());
    match values {
        FieldValues::Scalar(series) => {
            let _ = writeln!(out, "SCALARS {name} double 1");
            out.push_str("LOOKUP_TABLE default\n");
            for v in &series[step] {
                let _ = writeln!(out, "{v}");
            }
        }
        FieldValues::Vector(series) => {
            let _ = writeln!(out, "VECTORS {name} double");
            for v in &series[step] {
                let _ = writeln!(out, "{} {} 0", v[0], v[1]);
            }
        }
    }
    out
}

/// Write a full nodal trajectory: a field and its time rate at every
/// level, one row per node per step.
pub fn export_trajectory(path: &Path, u: &[Vec<f64>], ut: &[Vec<f64>]) -> Result<(), IoError> {
    assert_eq!(u.len(), ut.len(), "field and rate need matching levels");
    let mut out = String::from("node,step,u,ut\n");
    for (step, (u_level, ut_level)) in u.iter().zip(ut).enumerate() {
        for (node, (a, b)) in u_level.iter().zip(ut_level).enumerate() {
            let _ = writeln!(out, "{node},{step},{a},{b}");
        }
    }
    write_text(path, &out)
}

/// A trajectory read back from [`export_trajectory`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedTrajectory {
    /// Pressure levels.
    pub u: Vec<Vec<f64>>,
    /// Rate levels.
    pub ut: Vec<Vec<f64>>,
}

fn split_row<'a, const N: usize>(
    path: &Path,
    line_no: usize,
    line: &'a str,
) -> Result<[&'a str; N], IoError> {
    let parts: Vec<&str> = line.split(',').collect();
    parts.try_into().map_err(|_| IoError::Format {
        path: path.display().to_string(),
        line: line_no,
        message: format!("expected {N} comma-separated fields, got {line:?}"),
    })
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line_no: usize,
    what: &str,
    text: &str,
) -> Result<T, IoError> {
    text.parse().map_err(|_| IoError::Format {
        path: path.display().to_string(),
        line: line_no,
        message: format!("bad {what}: {text:?}"),
    })
}

/// Read a trajectory written by [`export_trajectory`], reproducing every
/// value bit-exactly.  Rows must be step-major with ascending, gapless
/// node ids, exactly as written.
pub fn import_trajectory(path: &Path) -> Result<ImportedTrajectory, IoError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: String| IoError::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    match lines.next() {
        Some((_, "node,step,u,ut")) => {}
        Some((_, other)) => return Err(bad(1, format!("bad header: {other:?}"))),
        None => return Err(bad(1, "empty file".to_string())),
    }
    let mut u: Vec<Vec<f64>> = Vec::new();
    let mut ut: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let [node_s, step_s, u_s, ut_s] = split_row(path, line_no, line)?;
        let node: usize = parse_field(path, line_no, "node id", node_s)?;
        let step: usize = parse_field(path, line_no, "step", step_s)?;
        if step == u.len() && node == 0 {
            u.push(Vec::new());
            ut.push(Vec::new());
        }
        if step + 1 != u.len() || node != u[step].len() {
            return Err(bad(line_no, format!("row ({node}, {step}) out of order")));
        }
        u[step].push(parse_field(path, line_no, "value", u_s)?);
        ut[step].push(parse_field(path, line_no, "value", ut_s)?);
    }
    if u.is_empty() {
        return Err(bad(1, "no data rows".to_string()));
    }
    let n = u[0].len();
    for (step, level) in u.iter().enumerate() {
        if level.len() != n {
            return Err(bad(
                1,
                format!("step {step} has {} nodes, step 0 has {n}", level.len()),
            ));
        }
    }
    Ok(ImportedTrajectory { u, ut })
}

/// Read a single-step scalar field written by [`export_field`] in CSV
/// form, reproducing the values bit-exactly.
pub fn import_nodal_field(path: &Path) -> Result<Vec<f64>, IoError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: String| IoError::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    match lines.next() {
        Some((_, "node,x,y,step,value")) => {}
        Some((_, other)) => return Err(bad(1, format!("bad header: {other:?}"))),
        None => return Err(bad(1, "empty file".to_string())),
    }
    let mut values = Vec::new();
    let mut seen_step = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let [node_s, _, _, step_s, value_s] = split_row(path, line_no, line)?;
        let node: usize = parse_field(path, line_no, "node id", node_s)?;
        let step: usize = parse_field(path, line_no, "step", step_s)?;
        match seen_step {
            None => seen_step = Some(step),
            Some(s) if s != step => {
                return Err(bad(
                    line_no,
                    format!("expected a single step, saw {s} and {step}"),
                ))
            }
            _ => {}
        }
        if node != values.len() {
            return Err(bad(line_no, format!("node {node} out of order")));
        }
        values.push(parse_field(path, line_no, "value", value_s)?);
    }
    if values.is_empty() {
        return Err(bad(1, "no data rows".to_string()));
    }
    Ok(values)
}

/// Read a single-step vector field written by [`export_field`] in CSV
/// form, reproducing the components bit-exactly.
pub fn import_vector_field(path: &Path) -> Result<Vec<Vec2>, IoError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: String| IoError::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    match lines.next() {
        Some((_, "node,x,y,step,value,value_y")) => {}
        Some((_, other)) => return Err(bad(1, format!("bad header: {other:?}"))),
        None => return Err(bad(1, "empty file".to_string())),
    }
    let mut values: Vec<Vec2> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let [node_s, _, _, _, vx_s, vy_s] = split_row(path, line_no, line)?;
        let node: usize = parse_field(path, line_no, "node id", node_s)?;
        if node != values.len() {
            return Err(bad(line_no, format!("node {node} out of order")));
        }
        values.push([
            parse_field(path, line_no, "value", vx_s)?,
            parse_field(path, line_no, "value", vy_s)?,
        ]);
    }
    if values.is_empty() {
        return Err(bad(1, "no data rows".to_string()));
    }
    Ok(values)
}

/// Write the optimizer history.  Wall-clock times are deliberately left
/// out so the table depends only on the configuration and seed.
pub fn export_history(path: &Path, history: &[IterationRecord]) -> Result<(), IoError> {
    let mut out = String::from(
        "iteration,cost,gradient_norm,step,min_element_area,max_turning_angle_deg,boundary_clearance\n",
    );
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.cost,
            r.gradient_norm,
            r.step,
            r.min_element_area,
            r.max_turning_angle_deg,
            r.boundary_clearance
        );
    }
    write_text(path, &out)
}

/// Write the difference-quotient table of a deformation check.
pub fn export_fd_slopes(path: &Path, fd: &FdOracle) -> Result<(), IoError> {
    let mut out = String::from("tau,cost_plus,cost_minus,central_slope,one_sided_slope\n");
    for (i, tau) in fd.taus.iter().enumerate() {
        let _ = writeln!(
            out,
            "{tau},{},{},{},{}",
            fd.costs_plus[i], fd.costs_minus[i], fd.central_slopes[i], fd.one_sided_slopes[i]
        );
    }
    write_text(path, &out)
}

/// Reproduction record written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Subcommand that produced the artifacts.
    pub command: String,
    /// `fnv1a64:` fingerprint of the serialized configuration.
    pub config_hash: String,
    /// Sibling file holding the full configuration.
    pub config_file: String,
    /// Producing package name.
    pub package: String,
    /// Producing package version.
    pub version: String,
    /// RNG seed the run used.
    pub seed: u64,
    /// Total wall time in seconds (informational; never part of the
    /// deterministic artifact surface).
    pub wall_seconds: f64,
    /// Artifact files written, relative to the manifest.
    pub artifacts: Vec<String>,
}

/// Write `manifest.toml` and the full `config.toml` into `dir`.
pub fn write_manifest(
    dir: &Path,
    config: &RunConfig,
    command: &str,
    wall_seconds: f64,
    artifacts: &[String],
) -> Result<Manifest, IoError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| IoError::Io { path: dir.display().to_string(), source })?;
    let config_text = config.to_toml();
    write_text(&dir.join("config.toml"), &config_text)?;
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: format!("fnv1a64:{:016x}", fnv1a_hash(config_text.as_bytes())),
        config_file: "config.toml".to_string(),
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        wall_seconds,
        artifacts: artifacts.to_vec(),
    };
    let text = toml::to_string_pretty(&manifest).expect("manifests always serialize");
    write_text(&dir.join("manifest.toml"), &text)?;
    Ok(manifest)
}

/// Read a manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Manifest, IoError> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| IoError::Format {
        path: path.display().to_string(),
        line: e.span().map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1),
        message: e.message().to_string(),
    })
}
