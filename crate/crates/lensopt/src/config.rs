//! Run configuration: the on-disk schema, its validation, and the
//! conversion into the runtime inputs of the solver modules.
//!
//! A run is described by a single TOML file.  Every key has a documented
//! default, so the empty file is already a complete, valid configuration
//! (the shipped reference setup: unit square, circular lens of radius 0.2,
//! λ contrast 2:1, q = 3, standing-wave initial data, zero target).  The
//! full schema with defaults:
//!
//! ```toml
//! seed = 0                          # RNG seed for generated test fields
//!
//! [domain]
//! min = [0.0, 0.0]                  # rectangle corners
//! max = [1.0, 1.0]
//! mesh_size = 0.0625                # target element diameter
//! lens = { kind = "circle", center = [0.5, 0.5], radius = 0.2 }
//! # other lens kinds:
//! #   { kind = "ellipse", center = [x, y], semi_axes = [a, b] }
//! #   { kind = "polygon", vertices = [[x1, y1], [x2, y2], ...] }
//!
//! [materials]
//! exponent = 3.0                    # damping exponent q ≥ 1, shared
//! # a material table, when present, must list all five constants
//! lens  = { bulk_modulus = 2.0, nonlinearity = 0.15, mass_density = 1.0, diffusivity = 0.05, damping_mix = 0.5 }
//! fluid = { bulk_modulus = 1.0, nonlinearity = 0.30, mass_density = 1.0, diffusivity = 0.05, damping_mix = 0.5 }
//!
//! [time]
//! t_end = 0.5                       # final time T
//! steps = 64                        # number of implicit midpoint steps
//!
//! [initial]                         # pressure at t = 0; the rate starts at 0
//! kind = "standing"                 # A·sin(πξ)sin(πη) in domain coordinates
//! amplitude = 0.1
//! # { kind = "pulse", amplitude = A, center = [x, y], width = w }
//! #     gives A·exp(−|x − c|²/w²)
//! # { kind = "zero" }
//! # { kind = "imported", path = "u0.csv" }    (nodal field export format)
//!
//! [target]                          # tracked pressure trajectory u_d
//! kind = "zero"
//! # { kind = "from_shape", lens = { ... } }   solve on the given lens shape,
//! #     resample onto the working mesh
//! # { kind = "imported", path = "ud.csv" }    (trajectory export format)
//!
//! [tolerances]
//! degeneracy_floor = 0.1
//! newton_tol_abs = 1e-10
//! newton_tol_rel = 1e-12
//! max_newton_iterations = 30
//! max_picard_iterations = 100
//! linear_tol = 1e-12
//! max_linear_iterations = 2000
//!
//! [gradient]
//! enabled = true                    # assemble shape-gradient data
//! regularization = 1e-8             # ε of the regularized norm |·|_ε
//! boundary_form = true              # also evaluate the interface expression
//! fd_check = true                   # difference-quotient comparison
//! fd_taus = [0.01, 0.005, 0.0025]   # deformation sizes, halving
//! fd_fields = 3                     # seeded random fields per check
//! field_amplitude = 1.0             # amplitude of the random fields
//! smoothing_passes = 4              # neighbor-averaging passes
//! # field_file = "h.csv"            # use this displacement field instead
//! #                                   of generated ones (vector CSV)
//!
//! [optimizer]
//! max_iterations = 100
//! gradient_tol = 1e-6
//! armijo_slope = 1e-4
//! max_halvings = 25
//! max_displacement = 0.5            # fraction of mesh_size per step
//!
//! [output]
//! directory = "out"
//! snapshots = 3                     # evenly spaced VTK snapshot count
//! ```
//!
//! Parsing reports the first syntax or schema error with its line and
//! column; validation collects every violated parameter range at once.
//! Relative `imported` paths are resolved against the directory of the
//! configuration file at load time.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Domain, LensShape};
use crate::la::Vec2;
use crate::optimizer::OptimizerOptions;
use crate::state::{DiagnosticsBounds, MaterialParams, SubdomainParams, TimeGrid};

/// Configuration loading failures.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// The file could not be read at all.
    #[error("cannot read configuration file {path}: {source}")]
    Io {
        /// Offending path.
        path: String,
        /// Underlying error.
        source: std::io::Error,
    },
    /// The text is not valid TOML or does not match the schema.
    #[error("configuration parse error at line {line}, column {column}: {message}")]
    Parse {
        /// 1-based line of the offending token.
        line: usize,
        /// 1-based column of the offending token.
        column: usize,
        /// Parser message.
        message: String,
    },
    /// The file parsed but one or more values are out of range.  Every
    /// violation is listed, not just the first.
    #[error("invalid configuration:\n  - {}", violations.join("\n  - "))]
    Validation {
        /// All violated constraints.
        violations: Vec<String>,
    },
}

/// Lens outline, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LensConfig {
    /// Circle of given center and radius.
    Circle {
        /// Center point.
        center: Vec2,
        /// Radius.
        radius: f64,
    },
    /// Axis-aligned ellipse.
    Ellipse {
        /// Center point.
        center: Vec2,
        /// Semi-axes (a, b).
        semi_axes: Vec2,
    },
    /// Simple closed polygon, vertices in order, closing edge implicit.
    Polygon {
        /// Vertex list.
        vertices: Vec<Vec2>,
    },
}

impl LensConfig {
    /// Convert to the geometry module's shape description.
    pub fn to_shape(&self) -> LensShape {
        match self {
            LensConfig::Circle { center, radius } => {
                LensShape::Circle { center: *center, radius: *radius }
            }
            LensConfig::Ellipse { center, semi_axes } => {
                LensShape::Ellipse { center: *center, semi_axes: *semi_axes }
            }
            LensConfig::Polygon { vertices } => {
                LensShape::Polygon { vertices: vertices.clone() }
            }
        }
    }

    /// Range violations of the outline parameters, prefixed by `where_`.
    fn violations(&self, where_: &str, out: &mut Vec<String>) {
        match self {
            LensConfig::Circle { radius, .. } => {
                if !(*radius > 0.0) {
                    out.push(format!("{where_}: circle radius must be positive, got {radius}"));
                }
            }
            LensConfig::Ellipse { semi_axes, .. } => {
                if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) {
                    out.push(format!(
                        "{where_}: ellipse semi-axes must be positive, got [{}, {}]",
                        semi_axes[0], semi_axes[1]
                    ));
                }
            }
            LensConfig::Polygon { vertices } => {
                if vertices.len() < 3 {
                    out.push(format!(
                        "{where_}: a polygon needs at least 3 vertices, got {}",
                        vertices.len()
                    ));
                }
            }
        }
    }
}

/// Rectangle, lens outline, and resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Lower-left corner of the rectangle.
    pub min: Vec2,
    /// Upper-right corner of the rectangle.
    pub max: Vec2,
    /// Target element diameter of the fitted mesh.
    pub mesh_size: f64,
    /// Lens outline; the mesh resolves it with boundary-aligned edges.
    pub lens: LensConfig,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
            mesh_size: 1.0 / 16.0,
            lens: LensConfig::Circle { center: [0.5, 0.5], radius: 0.2 },
        }
    }
}

impl DomainConfig {
    /// The rectangle as a geometry-module value.
    pub fn rectangle(&self) -> Domain {
        Domain { min: self.min, max: self.max }
    }
}

/// One material's constants.  A table of this shape must always list all
/// five values; defaults apply only when the whole table is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubdomainConfig {
    /// Bulk modulus λ > 0.
    pub bulk_modulus: f64,
    /// Acoustic nonlinearity k.
    pub nonlinearity: f64,
    /// Mass density ϱ > 0.
    pub mass_density: f64,
    /// Damping strength b ≥ 0.
    pub diffusivity: f64,
    /// Mix δ ∈ (0,1) between linear and gradient-power damping.
    pub damping_mix: f64,
}

impl SubdomainConfig {
    fn to_params(self) -> SubdomainParams {
        SubdomainParams {
            bulk_modulus: self.bulk_modulus,
            nonlinearity: self.nonlinearity,
            mass_density: self.mass_density,
            diffusivity: self.diffusivity,
            damping_mix: self.damping_mix,
        }
    }

    fn violations(&self, where_: &str, out: &mut Vec<String>) {
        if !(self.bulk_modulus > 0.0) {
            out.push(format!(
                "{where_}: bulk modulus λ must be positive, got {}",
                self.bulk_modulus
            ));
        }
        if !(self.mass_density > 0.0) {
            out.push(format!(
                "{where_}: mass density ϱ must be positive, got {}",
                self.mass_density
            ));
        }
        if !(self.diffusivity >= 0.0) {
            out.push(format!(
                "{where_}: diffusivity b must be nonnegative, got {}",
                self.diffusivity
            ));
        }
        if !(self.damping_mix > 0.0 && self.damping_mix < 1.0) {
            out.push(format!(
                "{where_}: damping mix must satisfy δ ∈ (0,1), got {}",
                self.damping_mix
            ));
        }
    }
}

fn default_lens_material() -> SubdomainConfig {
    SubdomainConfig {
        bulk_modulus: 2.0,
        nonlinearity: 0.15,
        mass_density: 1.0,
        diffusivity: 0.05,
        damping_mix: 0.5,
    }
}

fn default_fluid_material() -> SubdomainConfig {
    SubdomainConfig {
        bulk_modulus: 1.0,
        nonlinearity: 0.3,
        mass_density: 1.0,
        diffusivity: 0.05,
        damping_mix: 0.5,
    }
}

/// Material constants of both subdomains plus the shared damping exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialsConfig {
    /// Damping exponent q ≥ 1, shared by both materials.
    pub exponent: f64,
    /// Constants inside the lens.
    pub lens: SubdomainConfig,
    /// Constants in the surrounding fluid.
    pub fluid: SubdomainConfig,
}

impl Default for MaterialsConfig {
    fn default() -> Self {
        Self {
            exponent: 3.0,
            lens: default_lens_material(),
            fluid: default_fluid_material(),
        }
    }
}

/// Time horizon and step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    /// Final time T > 0.
    pub t_end: f64,
    /// Number of steps N ≥ 2.
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t_end: 0.5, steps: 64 }
    }
}

/// Initial pressure profile, tagged by `kind`.  The pressure rate always
/// starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConfig {
    /// A·sin(πξ)sin(πη) where (ξ, η) are coordinates normalized to the
    /// rectangle; vanishes on the outer boundary.
    Standing {
        /// Peak amplitude A.
        amplitude: f64,
    },
    /// Gaussian bump A·exp(−|x − c|²/w²).
    Pulse {
        /// Peak amplitude A.
        amplitude: f64,
        /// Bump center c.
        center: Vec2,
        /// Width w > 0.
        width: f64,
    },
    /// Start from rest.
    Zero,
    /// Nodal field read from a CSV export.
    Imported {
        /// File path; relative paths resolve against the config directory.
        path: String,
    },
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Standing { amplitude: 0.1 }
    }
}

impl InitialConfig {
    /// The analytic profile as a closure, or `None` for imported data.
    pub fn profile(&self, domain: &Domain) -> Option<Box<dyn Fn(Vec2) -> f64 + Sync + '_>> {
        let ext = [domain.max[0] - domain.min[0], domain.max[1] - domain.min[1]];
        let min = domain.min;
        match self {
            InitialConfig::Standing { amplitude } => {
                let a = *amplitude;
                Some(Box::new(move |p| {
                    let xi = (p[0] - min[0]) / ext[0];
                    let eta = (p[1] - min[1]) / ext[1];
                    a * (std::f64::consts::PI * xi).sin() * (std::f64::consts::PI * eta).sin()
                }))
            }
            InitialConfig::Pulse { amplitude, center, width } => {
                let (a, c, w) = (*amplitude, *center, *width);
                Some(Box::new(move |p| {
                    let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                    a * (-d2 / (w * w)).exp()
                }))
            }
            InitialConfig::Zero => Some(Box::new(|_| 0.0)),
            InitialConfig::Imported { .. } => None,
        }
    }
}

/// Tracked pressure u_d, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetConfig {
    /// u_d ≡ 0: pure pressure suppression.
    Zero,
    /// Solve the same problem on the given lens shape and resample the
    /// trajectory onto the working mesh.
    FromShape {
        /// Lens outline of the target shape.
        lens: LensConfig,
    },
    /// Nodal trajectory read from a CSV export.
    Imported {
        /// File path; relative paths resolve against the config directory.
        path: String,
    },
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig::Zero
    }
}

/// Solver tolerance knobs, mirroring the runtime diagnostics bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TolerancesConfig {
    /// Lowest admissible degeneracy factor min(1 − 2ku).
    pub degeneracy_floor: f64,
    /// Absolute nonlinear residual tolerance.
    pub newton_tol_abs: f64,
    /// Relative nonlinear residual tolerance.
    pub newton_tol_rel: f64,
    /// Newton iteration cap per step.
    pub max_newton_iterations: usize,
    /// Damped-fallback iteration cap per step.
    pub max_picard_iterations: usize,
    /// Relative tolerance of inner linear solves.
    pub linear_tol: f64,
    /// Inner linear iteration cap.
    pub max_linear_iterations: usize,
}

impl Default for TolerancesConfig {
    fn default() -> Self {
        let b = DiagnosticsBounds::default();
        Self {
            degeneracy_floor: b.degeneracy_floor,
            newton_tol_abs: b.newton_tol_abs,
            newton_tol_rel: b.newton_tol_rel,
            max_newton_iterations: b.max_newton_iterations,
            max_picard_iterations: b.max_picard_iterations,
            linear_tol: b.linear_tol,
            max_linear_iterations: b.max_linear_iterations,
        }
    }
}

/// Shape-gradient options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    /// Whether gradient data is assembled at all.
    pub enabled: bool,
    /// Regularization ε ≥ 0 of the norm |·|_ε in the damping kernels.
    pub regularization: f64,
    /// Also evaluate the interface-integral expression.
    pub boundary_form: bool,
    /// Compare against difference quotients of deformed re-solves.
    pub fd_check: bool,
    /// Deformation sizes for difference checks; must halve, length ≥ 2.
    pub fd_taus: Vec<f64>,
    /// Number of seeded random displacement fields per check.
    pub fd_fields: usize,
    /// Amplitude handed to the random-field generator.
    pub field_amplitude: f64,
    /// Neighbor-averaging passes of the random-field generator.
    pub smoothing_passes: usize,
    /// Displacement field file (vector CSV) evaluated instead of the
    /// generated ones; relative paths resolve against the config directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_file: Option<String>,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            regularization: 1e-8,
            boundary_form: true,
            fd_check: true,
            fd_taus: vec![1e-2, 5e-3, 2.5e-3],
            fd_fields: 3,
            field_amplitude: 1.0,
            smoothing_passes: 4,
            field_file: None,
        }
    }
}

/// Descent-loop options, mirroring the runtime optimizer options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Maximum accepted descent steps.
    pub max_iterations: usize,
    /// Convergence threshold on the descent-field norm.
    pub gradient_tol: f64,
    /// Armijo sufficient-decrease slope c₁ ∈ (0,1).
    pub armijo_slope: f64,
    /// Step halvings tolerated before the line search gives up.
    pub max_halvings: usize,
    /// Largest nodal displacement per step, as a fraction of mesh_size.
    pub max_displacement: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimizerOptions::default();
        Self {
            max_iterations: o.max_iterations,
            gradient_tol: o.gradient_tol,
            armijo_slope: o.armijo_slope,
            max_halvings: o.max_halvings,
            max_displacement: o.max_displacement,
        }
    }
}

/// Artifact destination and snapshot selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Artifact directory, created if absent.
    pub directory: String,
    /// Number of evenly spaced VTK snapshots (first and last included).
    pub snapshots: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: "out".to_string(), snapshots: 3 }
    }
}

/// A complete run description.  Every field has a documented default; see
/// the module docs for the full schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// RNG seed for generated test fields; at most 2⁶³ − 1 so it fits the
    /// on-disk integer range.
    pub seed: u64,
    /// Rectangle, lens, and resolution.
    pub domain: DomainConfig,
    /// Material constants.
    pub materials: MaterialsConfig,
    /// Time horizon and step count.
    pub time: TimeConfig,
    /// Initial pressure profile.
    pub initial: InitialConfig,
    /// Tracked pressure trajectory.
    pub target: TargetConfig,
    /// Solver tolerances.
    pub tolerances: TolerancesConfig,
    /// Shape-gradient options.
    pub gradient: GradientConfig,
    /// Descent-loop options.
    pub optimizer: OptimizerConfig,
    /// Artifact destination.
    pub output: OutputConfig,
}

impl RunConfig {
    /// Material constants in runtime form.  The kernel regularization is
    /// taken from the gradient section so a single knob governs both the
    /// solves and the gradient assembly.
    pub fn material_params(&self) -> MaterialParams {
        MaterialParams {
            lens: self.materials.lens.to_params(),
            fluid: self.materials.fluid.to_params(),
            exponent: self.materials.exponent,
            regularization: self.gradient.regularization,
        }
    }

    /// Time grid in runtime form.
    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.time.t_end, self.time.steps)
    }

    /// Solver bounds in runtime form.
    pub fn diagnostics_bounds(&self) -> DiagnosticsBounds {
        let t = &self.tolerances;
        DiagnosticsBounds {
            degeneracy_floor: t.degeneracy_floor,
            newton_tol_abs: t.newton_tol_abs,
            newton_tol_rel: t.newton_tol_rel,
            max_newton_iterations: t.max_newton_iterations,
            max_picard_iterations: t.max_picard_iterations,
            linear_tol: t.linear_tol,
            max_linear_iterations: t.max_linear_iterations,
        }
    }

    /// Descent-loop options in runtime form.
    pub fn optimizer_options(&self) -> OptimizerOptions {
        let o = &self.optimizer;
        OptimizerOptions {
            max_iterations: o.max_iterations,
            gradient_tol: o.gradient_tol,
            armijo_slope: o.armijo_slope,
            max_halvings: o.max_halvings,
            max_displacement: o.max_displacement,
        }
    }

    /// Serialize back to TOML.  Parsing the result reproduces the value
    /// exactly; floats are written in shortest round-trip form.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("a validated configuration always serializes")
    }

    /// Resolve relative `imported` paths against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let absolutize = |path: &mut String| {
            if Path::new(path.as_str()).is_relative() {
                *path = base.join(path.as_str()).to_string_lossy().into_owned();
            }
        };
        if let InitialConfig::Imported { path } = &mut self.initial {
            absolutize(path);
        }
        if let TargetConfig::Imported { path } = &mut self.target {
            absolutize(path);
        }
        if let Some(path) = &mut self.gradient.field_file {
            absolutize(path);
        }
    }

    /// Check every parameter range and referenced file, collecting all
    /// violations instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();

        let d = &self.domain;
        let ext = [d.max[0] - d.min[0], d.max[1] - d.min[1]];
        if !(ext[0] > 0.0 && ext[1] > 0.0) {
            v.push(format!(
                "domain: max must exceed min componentwise, got extent [{}, {}]",
                ext[0], ext[1]
            ));
        } else if !(d.mesh_size > 0.0 && d.mesh_size <= ext[0].min(ext[1]) / 4.0) {
            v.push(format!(
                "domain: mesh_size must lie in (0, {}], got {}",
                ext[0].min(ext[1]) / 4.0,
                d.mesh_size
            ));
        }
        d.lens.violations("domain.lens", &mut v);

        self.materials.lens.violations("materials.lens", &mut v);
        self.materials.fluid.violations("materials.fluid", &mut v);
        let q = self.materials.exponent;
        if !(q >= 1.0) {
            v.push(format!("materials: damping exponent must satisfy q ≥ 1, got {q}"));
        }

        if !(self.time.t_end > 0.0) {
            v.push(format!("time: t_end must be positive, got {}", self.time.t_end));
        }
        if self.time.steps < 2 {
            v.push(format!("time: need at least 2 steps, got {}", self.time.steps));
        }

        match &self.initial {
            InitialConfig::Pulse { width, .. } if !(*width > 0.0) => {
                v.push(format!("initial: pulse width must be positive, got {width}"));
            }
            InitialConfig::Imported { path } if !Path::new(path).is_file() => {
                v.push(format!("initial: imported field file {path} does not exist"));
            }
            _ => {}
        }
        match &self.target {
            TargetConfig::FromShape { lens } => lens.violations("target.lens", &mut v),
            TargetConfig::Imported { path } if !Path::new(path).is_file() => {
                v.push(format!("target: imported trajectory file {path} does not exist"));
            }
            _ => {}
        }

        let t = &self.tolerances;
        if !(t.degeneracy_floor > 0.0 && t.degeneracy_floor < 1.0) {
            v.push(format!(
                "tolerances: degeneracy floor must lie in (0,1), got {}",
                t.degeneracy_floor
            ));
        }
        for (name, value) in [
            ("newton_tol_abs", t.newton_tol_abs),
            ("newton_tol_rel", t.newton_tol_rel),
            ("linear_tol", t.linear_tol),
        ] {
            if !(value > 0.0) {
                v.push(format!("tolerances: {name} must be positive, got {value}"));
            }
        }
        for (name, value) in [
            ("max_newton_iterations", t.max_newton_iterations),
            ("max_picard_iterations", t.max_picard_iterations),
            ("max_linear_iterations", t.max_linear_iterations),
        ] {
            if value == 0 {
                v.push(format!("tolerances: {name} must be at least 1"));
            }
        }

        let g = &self.gradient;
        if !(g.regularization >= 0.0) {
            v.push(format!(
                "gradient: regularization must be nonnegative, got {}",
                g.regularization
            ));
        }
        if g.enabled && g.regularization == 0.0 && q > 1.0 && q <= 2.0 {
            v.push(format!(
                "gradient: with regularization ε = 0 the damping exponent must be q = 1 or \
                 satisfy q > 2, got q = {q}; set gradient.regularization > 0 or disable the \
                 gradient"
            ));
        }
        if g.fd_taus.len() < 2 {
            v.push(format!(
                "gradient: fd_taus needs at least two entries, got {}",
                g.fd_taus.len()
            ));
        }
        for pair in g.fd_taus.windows(2) {
            if !(pair[1] > 0.0) || (pair[0] / pair[1] - 2.0).abs() > 1e-9 {
                v.push(format!(
                    "gradient: fd_taus must be positive and halve, got {} then {}",
                    pair[0], pair[1]
                ));
            }
        }
        if let Some(&first) = g.fd_taus.first() {
            if !(first > 0.0) {
                v.push(format!("gradient: fd_taus must be positive, got {first}"));
            }
        }
        if g.fd_fields == 0 {
            v.push("gradient: fd_fields must be at least 1".to_string());
        }
        if let Some(path) = &g.field_file {
            if !Path::new(path).is_file() {
                v.push(format!("gradient: displacement field file {path} does not exist"));
            }
        }
        if !(g.field_amplitude > 0.0) {
            v.push(format!(
                "gradient: field_amplitude must be positive, got {}",
                g.field_amplitude
            ));
        }

        let o = &self.optimizer;
        if !(o.gradient_tol > 0.0) {
            v.push(format!("optimizer: gradient_tol must be positive, got {}", o.gradient_tol));
        }
        if !(o.armijo_slope > 0.0 && o.armijo_slope < 1.0) {
            v.push(format!(
                "optimizer: armijo_slope must lie in (0,1), got {}",
                o.armijo_slope
            ));
        }
        if o.max_halvings == 0 {
            v.push("optimizer: max_halvings must be at least 1".to_string());
        }
        if !(o.max_displacement > 0.0) {
            v.push(format!(
                "optimizer: max_displacement must be positive, got {}",
                o.max_displacement
            ));
        }

        if self.output.directory.is_empty() {
            v.push("output: directory must not be empty".to_string());
        }

        // The on-disk format stores signed 64-bit integers.
        if self.seed > i64::MAX as u64 {
            v.push(format!("seed: must be at most {}, got {}", i64::MAX, self.seed));
        }

        for (name, value) in self.float_fields() {
            if !value.is_finite() {
                v.push(format!("{name}: must be finite, got {value}"));
            }
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation { violations: v })
        }
    }

    /// Every scalar float in the configuration, for finiteness checks.
    fn float_fields(&self) -> Vec<(&'static str, f64)> {
        let (d, m, t, g, o) =
            (&self.domain, &self.materials, &self.tolerances, &self.gradient, &self.optimizer);
        vec![
            ("domain.min[0]", d.min[0]),
            ("domain.min[1]", d.min[1]),
            ("domain.max[0]", d.max[0]),
            ("domain.max[1]", d.max[1]),
            ("domain.mesh_size", d.mesh_size),
            ("materials.exponent", m.exponent),
            ("materials.lens.bulk_modulus", m.lens.bulk_modulus),
            ("materials.lens.nonlinearity", m.lens.nonlinearity),
            ("materials.lens.mass_density", m.lens.mass_density),
            ("materials.lens.diffusivity", m.lens.diffusivity),
            ("materials.lens.damping_mix", m.lens.damping_mix),
            ("materials.fluid.bulk_modulus", m.fluid.bulk_modulus),
            ("materials.fluid.nonlinearity", m.fluid.nonlinearity),
            ("materials.fluid.mass_density", m.fluid.mass_density),
            ("materials.fluid.diffusivity", m.fluid.diffusivity),
            ("materials.fluid.damping_mix", m.fluid.damping_mix),
            ("time.t_end", self.time.t_end),
            ("tolerances.degeneracy_floor", t.degeneracy_floor),
            ("tolerances.newton_tol_abs", t.newton_tol_abs),
            ("tolerances.newton_tol_rel", t.newton_tol_rel),
            ("tolerances.linear_tol", t.linear_tol),
            ("gradient.regularization", g.regularization),
            ("gradient.field_amplitude", g.field_amplitude),
            ("optimizer.gradient_tol", o.gradient_tol),
            ("optimizer.armijo_slope", o.armijo_slope),
            ("optimizer.max_displacement", o.max_displacement),
        ]
    }
}

/// 1-based line and column of a byte offset in `text`.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let clamped = offset.min(text.len());
    let before = &text[..clamped];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(clamped + 1, |p| clamped - p);
    (line, column)
}

fn parse_toml(text: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str::<RunConfig>(text).map_err(|e| {
        let (line, column) =
            e.span().map_or((1, 1), |span| line_column(text, span.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })
}

/// Parse and validate configuration text.  Relative `imported` paths are
/// kept as written (use [`parse_config`] to resolve them against a file's
/// directory).
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let config = parse_toml(text)?;
    config.validate()?;
    Ok(config)
}

/// Read, parse, and validate a configuration file.  Relative `imported`
/// paths are resolved against the file's directory before validation.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut config = parse_toml(&text)?;
    if let Some(base) = path.parent() {
        config.resolve_paths(base);
    }
    config.validate()?;
    Ok(config)
}
