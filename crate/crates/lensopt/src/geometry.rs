//! Lens-fitted triangulations and their deformation.
//!
//! The computational domain is a rectangle with an immersed lens whose
//! boundary Γ must be resolved by element edges: every triangle lies
//! entirely in the lens or entirely in the surrounding fluid, and the
//! material coefficients jump exactly across Γ.  Meshes come from a
//! structured diagonal-split grid whose nodes near the lens curve are
//! snapped onto it, followed by a sweep that projects endpoints of any
//! remaining sign-change edges.  Boundary nodes of the rectangle never
//! move, so the lens must keep a safe clearance from ∂Ω.
//!
//! Shape calculus enters through displacement fields h (P1, vanishing on
//! ∂Ω) and the induced maps F_τ = id + τh.  [`transform_factors`] records,
//! per element, the deformation Jacobian DF_τ = I + τDh, the volume factor
//! I_τ = det DF_τ, and the gradient transform A_τ = DF_τ^{-T}, together
//! with the step bound τ₀ = 0.5 / max‖Dh‖₂ below which F_τ is a
//! bi-Lipschitz homeomorphism on every element.  [`perturb_mesh`] applies
//! the map to the node coordinates while keeping the topology, so the
//! perturbed problem is solved on the same connectivity with the same
//! labels — exactly the transported setting the sensitivity analysis
//! differentiates.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fem::{self, ElementGeometry};
use crate::la::{self, Mat2, Vec2};

/// Geometry construction and deformation errors.
#[derive(Debug, Error)]
pub enum GeometryError {
    /// The lens curve comes too close to (or crosses) the outer boundary.
    #[error("lens clearance {clearance:.4} from the outer boundary is below the required {required:.4}")]
    LensTouchesBoundary {
        /// Smallest distance from the lens curve to ∂Ω.
        clearance: f64,
        /// Required clearance (two mesh cells).
        required: f64,
    },
    /// A triangle collapsed during snapping.
    #[error("element {element} degenerated while fitting the interface (area {area:.3e})")]
    DegenerateElement {
        /// Element index.
        element: usize,
        /// Signed area after snapping.
        area: f64,
    },
    /// A deformation inverted an element.
    #[error("element {element} folds under the requested displacement (det {det:.3e})")]
    FoldedElement {
        /// Element index.
        element: usize,
        /// Jacobian determinant (area ratio) of the offending element.
        det: f64,
    },
    /// The lens is too small for the requested mesh size to resolve.
    #[error("no element fell inside the lens at mesh size {mesh_size}")]
    UnresolvedLens {
        /// Requested mesh size.
        mesh_size: f64,
    },
    /// A mesh file violated the expected format.
    #[error("mesh file, line {line}: {message}")]
    MeshFormat {
        /// 1-based line number.
        line: usize,
        /// Problem description.
        message: String,
    },
    /// Underlying IO failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which side of the interface an element belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubdomainLabel {
    /// Inside the lens Ω₊.
    Lens,
    /// Surrounding fluid Ω₋.
    Fluid,
}

impl SubdomainLabel {
    /// True for the lens side.
    pub fn is_lens(self) -> bool {
        matches!(self, SubdomainLabel::Lens)
    }
}

/// Axis-aligned rectangular computational domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    /// Lower-left corner.
    pub min: Vec2,
    /// Upper-right corner.
    pub max: Vec2,
}

impl Domain {
    /// The unit square [0,1]².
    pub fn unit_square() -> Self {
        Self { min: [0.0, 0.0], max: [1.0, 1.0] }
    }

    /// Distance from an interior point to the rectangle boundary.
    pub fn distance_to_boundary(&self, p: Vec2) -> f64 {
        let dx = (p[0] - self.min[0]).min(self.max[0] - p[0]);
        let dy = (p[1] - self.min[1]).min(self.max[1] - p[1]);
        dx.min(dy)
    }
}

/// Parametrized lens outlines.
#[derive(Debug, Clone, PartialEq)]
pub enum LensShape {
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
    /// Simple closed polygon, vertices in order.
    Polygon {
        /// Vertex list; the closing edge is implicit.
        vertices: Vec<Vec2>,
    },
}

impl LensShape {
    /// Signed scalar that is negative inside the lens, positive outside,
    /// and approximately the distance to the curve near it (exact for
    /// circles and polygons).
    pub fn signed_value(&self, p: Vec2) -> f64 {
        match self {
            LensShape::Circle { center, radius } => la::norm(la::sub(p, *center)) - radius,
            LensShape::Ellipse { .. } => {
                let proj = self.project(p);
                let dist = la::norm(la::sub(p, proj));
                if self.inside_implicit(p) {
                    -dist
                } else {
                    dist
                }
            }
            LensShape::Polygon { vertices } => {
                let dist = polygon_distance(vertices, p);
                if polygon_contains(vertices, p) {
                    -dist
                } else {
                    dist
                }
            }
        }
    }

    fn inside_implicit(&self, p: Vec2) -> bool {
        match self {
            LensShape::Circle { center, radius } => la::norm(la::sub(p, *center)) < *radius,
            LensShape::Ellipse { center, semi_axes } => {
                let x = (p[0] - center[0]) / semi_axes[0];
                let y = (p[1] - center[1]) / semi_axes[1];
                x * x + y * y < 1.0
            }
            LensShape::Polygon { vertices } => polygon_contains(vertices, p),
        }
    }

    /// Closest point on the lens curve.
    pub fn project(&self, p: Vec2) -> Vec2 {
        match self {
            LensShape::Circle { center, radius } => {
                let d = la::sub(p, *center);
                let n = la::norm(d);
                if n == 0.0 {
                    [center[0] + radius, center[1]]
                } else {
                    la::axpy(*center, radius / n, d)
                }
            }
            LensShape::Ellipse { center, semi_axes } => {
                let (a, b) = (semi_axes[0], semi_axes[1]);
                let point_at = |t: f64| -> Vec2 { [center[0] + a * t.cos(), center[1] + b * t.sin()] };
                // Coarse scan, then Newton on d/dt |P(t) − p|².
                let mut best_t = 0.0;
                let mut best_d = f64::INFINITY;
                for k in 0..64 {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
                    let d = la::norm(la::sub(point_at(t), p));
                    if d < best_d {
                        best_d = d;
                        best_t = t;
                    }
                }
                let mut t = best_t;
                for _ in 0..12 {
                    let (s, c) = t.sin_cos();
                    let at = [center[0] + a * c, center[1] + b * s];
                    let dt = [-a * s, b * c];
                    let dtt = [-a * c, -b * s];
                    let diff = la::sub(at, p);
                    let g = la::dot(dt, diff);
                    let h = la::dot(dtt, diff) + la::dot(dt, dt);
                    if h.abs() < 1e-300 {
                        break;
                    }
                    let step = g / h;
                    t -= step;
                    if step.abs() < 1e-15 {
                        break;
                    }
                }
                point_at(t)
            }
            LensShape::Polygon { vertices } => polygon_project(vertices, p),
        }
    }

    /// Points distributed along the curve, used for clearance checks.
    pub fn boundary_samples(&self, n: usize) -> Vec<Vec2> {
        let n = n.max(8);
        match self {
            LensShape::Circle { center, radius } => (0..n)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
                })
                .collect(),
            LensShape::Ellipse { center, semi_axes } => (0..n)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    [center[0] + semi_axes[0] * t.cos(), center[1] + semi_axes[1] * t.sin()]
                })
                .collect(),
            LensShape::Polygon { vertices } => {
                let m = vertices.len();
                let total: f64 = (0..m)
                    .map(|i| la::norm(la::sub(vertices[(i + 1) % m], vertices[i])))
                    .sum();
                let mut out = Vec::new();
                for i in 0..m {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % m];
                    let len = la::norm(la::sub(b, a));
                    let k = ((n as f64 * len / total).ceil() as usize).max(1);
                    for j in 0..k {
                        let s = j as f64 / k as f64;
                        out.push(la::axpy(a, s, la::sub(b, a)));
                    }
                }
                out
            }
        }
    }
}

fn polygon_contains(vertices: &[Vec2], p: Vec2) -> bool {
    let mut inside = false;
    let m = vertices.len();
    for i in 0..m {
        let a = vertices[i];
        let b = vertices[(i + 1) % m];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn segment_project(a: Vec2, b: Vec2, p: Vec2) -> Vec2 {
    let d = la::sub(b, a);
    let len2 = la::dot(d, d);
    if len2 == 0.0 {
        return a;
    }
    let t = (la::dot(la::sub(p, a), d) / len2).clamp(0.0, 1.0);
    la::axpy(a, t, d)
}

fn polygon_project(vertices: &[Vec2], p: Vec2) -> Vec2 {
    let m = vertices.len();
    let mut best = vertices[0];
    let mut best_d = f64::INFINITY;
    for i in 0..m {
        let q = segment_project(vertices[i], vertices[(i + 1) % m], p);
        let d = la::norm(la::sub(q, p));
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    best
}

fn polygon_distance(vertices: &[Vec2], p: Vec2) -> f64 {
    la::norm(la::sub(polygon_project(vertices, p), p))
}

/// One edge of the material interface Γ, oriented so the lens element lies
/// to the left of `nodes[0] → nodes[1]`; the outward (lens-to-fluid)
/// normal is then the right normal of that direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterfaceEdge {
    /// Endpoint node indices, lens side to the left.
    pub nodes: [usize; 2],
    /// Adjacent element inside the lens.
    pub lens_element: usize,
    /// Adjacent element in the fluid.
    pub fluid_element: usize,
}

impl InterfaceEdge {
    /// Edge length on the given mesh.
    pub fn length(&self, mesh: &Mesh2D) -> f64 {
        la::norm(la::sub(mesh.nodes[self.nodes[1]], mesh.nodes[self.nodes[0]]))
    }

    /// Unit normal pointing from the lens into the fluid.
    pub fn outward_normal(&self, mesh: &Mesh2D) -> Vec2 {
        let d = la::sub(mesh.nodes[self.nodes[1]], mesh.nodes[self.nodes[0]]);
        let len = la::norm(d);
        [d[1] / len, -d[0] / len]
    }
}

/// Conforming two-material triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh2D {
    /// Node coordinates.
    pub nodes: Vec<Vec2>,
    /// Triangles as node index triples, counterclockwise.
    pub elements: Vec<[usize; 3]>,
    /// Per-element material side.
    pub labels: Vec<SubdomainLabel>,
    /// True for nodes on the outer boundary ∂Ω (homogeneous Dirichlet).
    pub boundary_node: Vec<bool>,
    /// Edges of the material interface Γ.
    pub interface_edges: Vec<InterfaceEdge>,
    /// Rectangle the mesh triangulates.
    pub domain: Domain,
    /// Nominal mesh size the builder was asked for.
    pub mesh_size: f64,
}

impl Mesh2D {
    /// Number of nodes.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of elements.
    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Per-element P1 geometry, in element order.
    pub fn element_geometries(&self) -> Vec<ElementGeometry> {
        self.elements
            .iter()
            .map(|el| fem::element_geometry([self.nodes[el[0]], self.nodes[el[1]], self.nodes[el[2]]]))
            .collect()
    }

    /// Total area of the lens subdomain.
    pub fn lens_area(&self) -> f64 {
        self.elements
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| l.is_lens())
            .map(|(el, _)| fem::signed_area([self.nodes[el[0]], self.nodes[el[1]], self.nodes[el[2]]]))
            .sum()
    }

    /// Total length of the interface Γ.
    pub fn interface_length(&self) -> f64 {
        self.interface_edges.iter().map(|e| e.length(self)).sum()
    }

    /// Sorted unique node indices lying on Γ.
    pub fn interface_nodes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .interface_edges
            .iter()
            .flat_map(|e| e.nodes)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Γ decomposed into closed node loops; `None` if some interface node
    /// does not have exactly two incident interface edges.
    pub fn interface_loops(&self) -> Option<Vec<Vec<usize>>> {
        let mut adjacency: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for e in &self.interface_edges {
            adjacency.entry(e.nodes[0]).or_default().push(e.nodes[1]);
            adjacency.entry(e.nodes[1]).or_default().push(e.nodes[0]);
        }
        if adjacency.values().any(|v| v.len() != 2) {
            return None;
        }
        let mut visited: BTreeMap<usize, bool> =
            adjacency.keys().map(|&k| (k, false)).collect();
        let mut loops = Vec::new();
        for (&start, _) in &adjacency {
            if visited[&start] {
                continue;
            }
            let mut cycle = vec![start];
            visited.insert(start, true);
            let mut prev = start;
            let mut cur = adjacency[&start][0];
            while cur != start {
                visited.insert(cur, true);
                cycle.push(cur);
                let next = adjacency[&cur]
                    .iter()
                    .copied()
                    .find(|&n| n != prev)?;
                prev = cur;
                cur = next;
            }
            loops.push(cycle);
        }
        Some(loops)
    }

    /// Largest direction change (degrees) between consecutive Γ segments,
    /// over all loops; 0 for a perfectly straight polyline, 180 for a
    /// hairpin.  Returns `None` when Γ does not decompose into loops.
    pub fn max_turning_angle_deg(&self) -> Option<f64> {
        let loops = self.interface_loops()?;
        let mut max_angle = 0.0_f64;
        for cycle in &loops {
            let m = cycle.len();
            for i in 0..m {
                let a = self.nodes[cycle[i]];
                let b = self.nodes[cycle[(i + 1) % m]];
                let c = self.nodes[cycle[(i + 2) % m]];
                max_angle = max_angle.max(turning_angle_deg(a, b, c));
            }
        }
        Some(max_angle)
    }

    /// Nodal samples of a scalar function.
    pub fn sample_scalar(&self, f: impl Fn(Vec2) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&p| f(p)).collect()
    }

    /// Containing element and barycentric weights for a point.
    ///
    /// Picks the element whose smallest barycentric coordinate is largest;
    /// for a point inside the triangulation all weights are nonnegative.  A
    /// point slightly outside (boundary roundoff) lands on the nearest
    /// element with tiny negatives clamped away, keeping interpolation
    /// well-defined on shared domains.
    pub fn locate(&self, p: Vec2) -> (usize, [f64; 3]) {
        let mut best = (0usize, [0.0; 3], f64::NEG_INFINITY);
        for (e, el) in self.elements.iter().enumerate() {
            let a = self.nodes[el[0]];
            let b = self.nodes[el[1]];
            let c = self.nodes[el[2]];
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            let w1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
            let w2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
            let w0 = 1.0 - w1 - w2;
            let min_w = w0.min(w1).min(w2);
            if min_w > best.2 {
                best = (e, [w0, w1, w2], min_w);
                if min_w >= 0.0 {
                    break;
                }
            }
        }
        let (e, mut w, _) = best;
        let mut sum = 0.0;
        for wi in &mut w {
            *wi = wi.max(0.0);
            sum += *wi;
        }
        for wi in &mut w {
            *wi /= sum;
        }
        (e, w)
    }

    /// Node-to-node adjacency (including self), sorted per node.
    pub fn node_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbr: Vec<Vec<usize>> = vec![Vec::new(); self.n_nodes()];
        for el in &self.elements {
            for &i in el {
                for &j in el {
                    nbr[i].push(j);
                }
            }
        }
        for list in &mut nbr {
            list.sort_unstable();
            list.dedup();
        }
        nbr
    }

    /// Structural sanity checks: positive element areas and a Γ that is
    /// consistently oriented.  Panics on violation; meant for tests and
    /// post-construction assertions.
    pub fn validate(&self) {
        for (e, el) in self.elements.iter().enumerate() {
            let area = fem::signed_area([self.nodes[el[0]], self.nodes[el[1]], self.nodes[el[2]]]);
            assert!(area > 0.0, "element {e} is not counterclockwise (area {area})");
        }
        for edge in &self.interface_edges {
            assert!(self.labels[edge.lens_element].is_lens());
            assert!(!self.labels[edge.fluid_element].is_lens());
        }
    }
}

/// Direction change at `b` along the polyline a → b → c, in degrees.
fn turning_angle_deg(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let d1 = la::sub(b, a);
    let d2 = la::sub(c, b);
    let cross = d1[0] * d2[1] - d1[1] * d2[0];
    let dot = la::dot(d1, d2);
    cross.atan2(dot).abs().to_degrees()
}

/// Build a lens-fitted mesh of the domain at nominal mesh size `h`.
///
/// Grid nodes within 0.3h of the lens curve are projected onto it; any
/// remaining element edge whose endpoints lie strictly on opposite sides
/// gets its nearer endpoint projected as well, so Γ is exactly a union of
/// element edges.  Outer-boundary nodes never move, which requires the
/// lens to keep a clearance of two cells from ∂Ω.
pub fn build_mesh(domain: Domain, lens: &LensShape, h: f64) -> Result<Mesh2D, GeometryError> {
    assert!(h > 0.0, "mesh size must be positive");
    let width = domain.max[0] - domain.min[0];
    let height = domain.max[1] - domain.min[1];
    assert!(width > 0.0 && height > 0.0, "domain must be nondegenerate");

    // Clearance: every point of the curve at least two cells inside.
    let required = 2.0 * h;
    let samples = lens.boundary_samples(((8.0 * (width + height)) / h) as usize);
    let clearance = samples
        .iter()
        .map(|&p| domain.distance_to_boundary(p))
        .fold(f64::INFINITY, f64::min);
    if !(clearance >= required) {
        return Err(GeometryError::LensTouchesBoundary { clearance, required });
    }

    let nx = (width / h).round().max(2.0) as usize;
    let ny = (height / h).round().max(2.0) as usize;
    let hx = width / nx as f64;
    let hy = height / ny as f64;
    let node_id = |i: usize, j: usize| j * (nx + 1) + i;

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut boundary_node = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push([
                domain.min[0] + i as f64 * hx,
                domain.min[1] + j as f64 * hy,
            ]);
            boundary_node.push(i == 0 || i == nx || j == 0 || j == ny);
        }
    }

    let mut elements = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let a = node_id(i, j);
            let b = node_id(i + 1, j);
            let c = node_id(i + 1, j + 1);
            let d = node_id(i, j + 1);
            elements.push([a, b, c]);
            elements.push([a, c, d]);
        }
    }

    // Snap pass: project near nodes onto the curve.
    let snap = 0.3 * h.min(hx.min(hy));
    for (idx, p) in nodes.iter_mut().enumerate() {
        if boundary_node[idx] {
            continue;
        }
        if lens.signed_value(*p).abs() < snap {
            *p = lens.project(*p);
        }
    }

    // Fitting sweeps: kill remaining strict sign changes along edges by
    // moving the nearer endpoint to the point where the edge crosses the
    // curve.  Moving along the edge (rather than normally onto the curve)
    // keeps distinct nodes distinct: two nodes on one normal ray of the
    // curve would project to the same curve point and collapse their
    // triangle.
    let on_tol = 1e-9 * h;
    for _ in 0..16 {
        let mut moved = false;
        for el in &elements {
            for k in 0..3 {
                let u = el[k];
                let v = el[(k + 1) % 3];
                let su = lens.signed_value(nodes[u]);
                let sv = lens.signed_value(nodes[v]);
                if su.abs() <= on_tol || sv.abs() <= on_tol || su.signum() == sv.signum() {
                    continue;
                }
                let cut = edge_cut_point(lens, nodes[u], nodes[v], su);
                let target = if su.abs() <= sv.abs() { u } else { v };
                if boundary_node[target] {
                    // Clearance makes this unreachable; fall back to the
                    // other endpoint to stay safe.
                    let other = if target == u { v } else { u };
                    nodes[other] = cut;
                } else {
                    nodes[target] = cut;
                }
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }

    // Degeneracy check after snapping.
    let min_area = 1e-3 * h * h;
    for (e, el) in elements.iter().enumerate() {
        let area = fem::signed_area([nodes[el[0]], nodes[el[1]], nodes[el[2]]]);
        if area <= min_area {
            return Err(GeometryError::DegenerateElement { element: e, area });
        }
    }

    // Labels by centroid side.
    let labels: Vec<SubdomainLabel> = elements
        .iter()
        .map(|el| {
            let c = [
                (nodes[el[0]][0] + nodes[el[1]][0] + nodes[el[2]][0]) / 3.0,
                (nodes[el[0]][1] + nodes[el[1]][1] + nodes[el[2]][1]) / 3.0,
            ];
            if lens.signed_value(c) < 0.0 {
                SubdomainLabel::Lens
            } else {
                SubdomainLabel::Fluid
            }
        })
        .collect();
    if !labels.iter().any(|l| l.is_lens()) {
        return Err(GeometryError::UnresolvedLens { mesh_size: h });
    }

    let interface_edges = collect_interface_edges(&nodes, &elements, &labels);

    // Polish: interface nodes sit exactly on the curve.
    let mut mesh = Mesh2D {
        nodes,
        elements,
        labels,
        boundary_node,
        interface_edges,
        domain,
        mesh_size: h,
    };
    for idx in mesh.interface_nodes() {
        if !mesh.boundary_node[idx] {
            mesh.nodes[idx] = lens.project(mesh.nodes[idx]);
        }
    }
    for (e, el) in mesh.elements.iter().enumerate() {
        let area = fem::signed_area([mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]]]);
        if area <= min_area {
            return Err(GeometryError::DegenerateElement { element: e, area });
        }
    }
    Ok(mesh)
}

/// Point where the segment a→b crosses the lens curve, found by bisection
/// on the signed value; `sa` is the signed value at `a` and the endpoints
/// bracket a sign change.
fn edge_cut_point(lens: &LensShape, a: Vec2, b: Vec2, sa: f64) -> Vec2 {
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let p = la::axpy(a, mid, la::sub(b, a));
        let s = lens.signed_value(p);
        if s == 0.0 {
            return p;
        }
        if s.signum() == sa.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    la::axpy(a, 0.5 * (lo + hi), la::sub(b, a))
}

/// Interface edges in deterministic (element-order) traversal, oriented
/// with the lens on the left.
fn collect_interface_edges(
    nodes: &[Vec2],
    elements: &[[usize; 3]],
    labels: &[SubdomainLabel],
) -> Vec<InterfaceEdge> {
    let mut edge_owner: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (e, el) in elements.iter().enumerate() {
        for k in 0..3 {
            let a = el[k];
            let b = el[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            edge_owner.entry(key).or_default().push(e);
        }
    }
    let mut out = Vec::new();
    let mut seen: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    for (e, el) in elements.iter().enumerate() {
        for k in 0..3 {
            let a = el[k];
            let b = el[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            if seen.contains_key(&key) {
                continue;
            }
            let owners = &edge_owner[&key];
            if owners.len() != 2 {
                continue;
            }
            let other = if owners[0] == e { owners[1] } else { owners[0] };
            if labels[e] == labels[other] {
                continue;
            }
            seen.insert(key, true);
            let (lens_element, fluid_element) = if labels[e].is_lens() {
                (e, other)
            } else {
                (other, e)
            };
            // Orient with the lens centroid to the left of nodes[0]→nodes[1].
            let lens_el = elements[lens_element];
            let centroid = [
                (nodes[lens_el[0]][0] + nodes[lens_el[1]][0] + nodes[lens_el[2]][0]) / 3.0,
                (nodes[lens_el[0]][1] + nodes[lens_el[1]][1] + nodes[lens_el[2]][1]) / 3.0,
            ];
            let d = la::sub(nodes[b], nodes[a]);
            let to_centroid = la::sub(centroid, nodes[a]);
            let cross = d[0] * to_centroid[1] - d[1] * to_centroid[0];
            let nodes_oriented = if cross > 0.0 { [a, b] } else { [b, a] };
            out.push(InterfaceEdge {
                nodes: nodes_oriented,
                lens_element,
                fluid_element,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Displacement fields and deformation
// ---------------------------------------------------------------------------

/// Nodal P1 displacement (shape velocity) field, zero on ∂Ω.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    /// Per-node displacement vectors.
    pub values: Vec<Vec2>,
}

impl VelocityField {
    /// The zero field.
    pub fn zeros(n_nodes: usize) -> Self {
        Self { values: vec![[0.0, 0.0]; n_nodes] }
    }

    /// Sample an analytic field at the nodes; outer-boundary nodes are
    /// forced to zero so the domain itself never deforms.
    pub fn from_fn(mesh: &Mesh2D, f: impl Fn(Vec2) -> Vec2) -> Self {
        let values = mesh
            .nodes
            .iter()
            .zip(&mesh.boundary_node)
            .map(|(&p, &bnd)| if bnd { [0.0, 0.0] } else { f(p) })
            .collect();
        Self { values }
    }

    /// Seeded random interior displacements smoothed by neighbor averaging,
    /// scaled to the requested maximum amplitude.  Deterministic in
    /// (seed, mesh).
    pub fn smoothed_random(mesh: &Mesh2D, seed: u64, amplitude: f64, passes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = mesh.n_nodes();
        let mut values: Vec<Vec2> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        for (v, &bnd) in values.iter_mut().zip(&mesh.boundary_node) {
            if bnd {
                *v = [0.0, 0.0];
            }
        }
        let neighbors = mesh.node_neighbors();
        for _ in 0..passes {
            let prev = values.clone();
            for i in 0..n {
                if mesh.boundary_node[i] {
                    continue;
                }
                let mut acc = [0.0, 0.0];
                for &j in &neighbors[i] {
                    acc = la::add(acc, prev[j]);
                }
                values[i] = la::scale(1.0 / neighbors[i].len() as f64, acc);
            }
        }
        let max = values.iter().map(|&v| la::norm(v)).fold(0.0, f64::max);
        if max > 0.0 {
            let s = amplitude / max;
            for v in &mut values {
                *v = la::scale(s, *v);
            }
        }
        Self { values }
    }

    /// Largest nodal displacement norm.
    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|&v| la::norm(v)).fold(0.0, f64::max)
    }

    /// Field scaled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|&v| la::scale(s, v)).collect() }
    }

    /// Local values on an element.
    pub fn on_element(&self, el: [usize; 3]) -> [Vec2; 3] {
        [self.values[el[0]], self.values[el[1]], self.values[el[2]]]
    }
}

/// Per-element factors of the map F_τ = id + τh.
#[derive(Debug, Clone, Copy)]
pub struct ElementTransform {
    /// Deformation Jacobian DF_τ = I + τ Dh.
    pub deformation_jacobian: Mat2,
    /// Volume factor I_τ = det DF_τ.
    pub volume_factor: f64,
    /// Gradient transform A_τ = DF_τ^{-T}.
    pub gradient_transform: Mat2,
}

/// Deformation factors of a displacement field at one step size, plus the
/// step bound τ₀ below which no element can fold.
#[derive(Debug, Clone)]
pub struct TransformRecord {
    /// Step size the factors were evaluated at.
    pub tau: f64,
    /// Per-element factors, in element order.
    pub elements: Vec<ElementTransform>,
    /// Per-element displacement gradients Dh (τ-independent).
    pub displacement_gradients: Vec<Mat2>,
    /// Largest spectral norm of Dh over elements.
    pub max_gradient_norm: f64,
    /// Safe step bound τ₀ = 0.5 / max‖Dh‖₂ (infinite for h ≡ 0).
    pub tau_max: f64,
}

/// Evaluate the deformation factors of `h` at step `tau`.
///
/// Fails with [`GeometryError::FoldedElement`] when some element Jacobian
/// determinant drops below machine-positive.
pub fn transform_factors(
    mesh: &Mesh2D,
    h: &VelocityField,
    tau: f64,
) -> Result<TransformRecord, GeometryError> {
    assert_eq!(h.values.len(), mesh.n_nodes(), "field and mesh disagree on node count");
    let geometries = mesh.element_geometries();
    let mut elements = Vec::with_capacity(mesh.n_elements());
    let mut displacement_gradients = Vec::with_capacity(mesh.n_elements());
    let mut max_gradient_norm = 0.0_f64;
    for (e, el) in mesh.elements.iter().enumerate() {
        let geo = &geometries[e];
        let hv = h.on_element(*el);
        let mut dh = [[0.0; 2]; 2];
        for a in 0..3 {
            dh = la::mat_axpy(&dh, 1.0, &la::outer(hv[a], geo.grad[a]));
        }
        max_gradient_norm = max_gradient_norm.max(la::spectral_norm(&dh));
        let df = la::mat_axpy(&la::IDENTITY, tau, &dh);
        let det = la::det(&df);
        if det <= 1e-12 {
            return Err(GeometryError::FoldedElement { element: e, det });
        }
        elements.push(ElementTransform {
            deformation_jacobian: df,
            volume_factor: det,
            gradient_transform: la::transpose(&la::inverse(&df)),
        });
        displacement_gradients.push(dh);
    }
    let tau_max = if max_gradient_norm > 0.0 {
        0.5 / max_gradient_norm
    } else {
        f64::INFINITY
    };
    Ok(TransformRecord {
        tau,
        elements,
        displacement_gradients,
        max_gradient_norm,
        tau_max,
    })
}

/// Move the mesh nodes by τh, keeping topology, labels, and interface
/// connectivity.  Fails with [`GeometryError::FoldedElement`] if some
/// triangle inverts (reported with its area ratio, which equals the
/// element Jacobian determinant).
pub fn perturb_mesh(mesh: &Mesh2D, h: &VelocityField, tau: f64) -> Result<Mesh2D, GeometryError> {
    assert_eq!(h.values.len(), mesh.n_nodes(), "field and mesh disagree on node count");
    let mut out = mesh.clone();
    for (p, v) in out.nodes.iter_mut().zip(&h.values) {
        *p = la::axpy(*p, tau, *v);
    }
    for (e, el) in out.elements.iter().enumerate() {
        let new_area = fem::signed_area([out.nodes[el[0]], out.nodes[el[1]], out.nodes[el[2]]]);
        let old_area = fem::signed_area([mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]]]);
        let det = new_area / old_area;
        if det <= 1e-12 {
            return Err(GeometryError::FoldedElement { element: e, det });
        }
    }
    Ok(out)
}

/// Admissibility diagnostics for a fitted mesh; purely informational.
#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    /// Smallest distance from Γ nodes to the outer boundary.
    pub boundary_clearance: f64,
    /// Required clearance (two nominal cells).
    pub required_clearance: f64,
    /// Whether Γ decomposes into closed loops of degree-2 nodes.
    pub interface_closed: bool,
    /// Largest direction change along Γ, degrees (180 = hairpin).
    pub max_turning_angle_deg: f64,
    /// Bound the turning angle is checked against.
    pub turning_angle_bound_deg: f64,
    /// Smallest element area.
    pub min_element_area: f64,
    /// All checks combined.
    pub admissible: bool,
}

/// Turning-angle bound used as the discrete stand-in for interface
/// regularity: direction changes above this flag a spike or fold-back.
pub const TURNING_ANGLE_BOUND_DEG: f64 = 150.0;

/// Diagnostic admissibility check of the current mesh.
pub fn check_admissible(mesh: &Mesh2D) -> AdmissibilityReport {
    let required_clearance = 2.0 * mesh.mesh_size;
    let boundary_clearance = mesh
        .interface_nodes()
        .iter()
        .map(|&i| mesh.domain.distance_to_boundary(mesh.nodes[i]))
        .fold(f64::INFINITY, f64::min);
    let loops = mesh.interface_loops();
    let interface_closed = loops.is_some();
    let max_turning_angle_deg = mesh.max_turning_angle_deg().unwrap_or(180.0);
    let min_element_area = mesh
        .elements
        .iter()
        .map(|el| fem::signed_area([mesh.nodes[el[0]], mesh.nodes[el[1]], mesh.nodes[el[2]]]))
        .fold(f64::INFINITY, f64::min);
    let admissible = boundary_clearance >= required_clearance
        && interface_closed
        && max_turning_angle_deg <= TURNING_ANGLE_BOUND_DEG
        && min_element_area > 0.0;
    AdmissibilityReport {
        boundary_clearance,
        required_clearance,
        interface_closed,
        max_turning_angle_deg,
        turning_angle_bound_deg: TURNING_ANGLE_BOUND_DEG,
        min_element_area,
        admissible,
    }
}

// ---------------------------------------------------------------------------
// Mesh file IO
// ---------------------------------------------------------------------------

/// Write a mesh in the plain text format (`NODES` / `ELEMS` / `GAMMA`
/// header, then one record per line).  Floats use Rust's shortest
/// round-trip formatting, so write → read → write is byte-stable.
pub fn write_mesh(mesh: &Mesh2D, w: &mut impl Write) -> Result<(), GeometryError> {
    writeln!(w, "NODES {}", mesh.n_nodes())?;
    writeln!(w, "ELEMS {}", mesh.n_elements())?;
    writeln!(w, "GAMMA {}", mesh.interface_edges.len())?;
    writeln!(
        w,
        "DOMAIN {} {} {} {}",
        mesh.domain.min[0], mesh.domain.min[1], mesh.domain.max[0], mesh.domain.max[1]
    )?;
    writeln!(w, "H {}", mesh.mesh_size)?;
    for (p, &bnd) in mesh.nodes.iter().zip(&mesh.boundary_node) {
        writeln!(w, "{} {} {}", p[0], p[1], u8::from(bnd))?;
    }
    for (el, label) in mesh.elements.iter().zip(&mesh.labels) {
        let tag = if label.is_lens() { "L" } else { "F" };
        writeln!(w, "{} {} {} {}", el[0], el[1], el[2], tag)?;
    }
    for e in &mesh.interface_edges {
        writeln!(
            w,
            "{} {} {} {}",
            e.nodes[0], e.nodes[1], e.lens_element, e.fluid_element
        )?;
    }
    Ok(())
}

/// Read a mesh written by [`write_mesh`].
pub fn read_mesh(r: &mut impl BufRead) -> Result<Mesh2D, GeometryError> {
    let mut lines = r.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String), GeometryError> {
        match lines.next() {
            Some((i, Ok(s))) => Ok((i + 1, s)),
            Some((i, Err(e))) => Err(GeometryError::MeshFormat {
                line: i + 1,
                message: format!("read failure: {e}"),
            }),
            None => Err(GeometryError::MeshFormat {
                line: 0,
                message: format!("unexpected end of file, expecting {what}"),
            }),
        }
    };
    let header_count = |tag: &str, (line, s): (usize, String)| -> Result<usize, GeometryError> {
        let mut parts = s.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(n), None) if t == tag => n.parse().map_err(|_| {
                GeometryError::MeshFormat { line, message: format!("bad {tag} count: {n}") }
            }),
            _ => Err(GeometryError::MeshFormat {
                line,
                message: format!("expected `{tag} <count>`, got `{s}`"),
            }),
        }
    };
    let n_nodes = header_count("NODES", next_line("NODES header")?)?;
    let n_elems = header_count("ELEMS", next_line("ELEMS header")?)?;
    let n_gamma = header_count("GAMMA", next_line("GAMMA header")?)?;

    let (line, s) = next_line("DOMAIN header")?;
    let domain = {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "DOMAIN" {
            return Err(GeometryError::MeshFormat {
                line,
                message: format!("expected `DOMAIN x0 y0 x1 y1`, got `{s}`"),
            });
        }
        let mut vals = [0.0; 4];
        for (k, p) in parts[1..].iter().enumerate() {
            vals[k] = p.parse().map_err(|_| GeometryError::MeshFormat {
                line,
                message: format!("bad coordinate `{p}`"),
            })?;
        }
        Domain { min: [vals[0], vals[1]], max: [vals[2], vals[3]] }
    };
    let (line, s) = next_line("H header")?;
    let mesh_size = {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 2 || parts[0] != "H" {
            return Err(GeometryError::MeshFormat {
                line,
                message: format!("expected `H <mesh size>`, got `{s}`"),
            });
        }
        parts[1].parse().map_err(|_| GeometryError::MeshFormat {
            line,
            message: format!("bad mesh size `{}`", parts[1]),
        })?
    };

    let mut nodes = Vec::with_capacity(n_nodes);
    let mut boundary_node = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (line, s) = next_line("node record")?;
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(GeometryError::MeshFormat {
                line,
                message: format!("expected `x y boundary`, got `{s}`"),
            });
        }
        let bad = |p: &str| GeometryError::MeshFormat {
            line,
            message: format!("bad node field `{p}`"),
        };
        nodes.push([
            parts[0].parse().map_err(|_| bad(parts[0]))?,
            parts[1].parse().map_err(|_| bad(parts[1]))?,
        ]);
        boundary_node.push(match parts[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(other)),
        });
    }

    let mut elements = Vec::with_capacity(n_elems);
    let mut labels = Vec::with_capacity(n_elems);
    for _ in 0..n_elems {
        let (line, s) = next_line("element record")?;
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(GeometryError::MeshFormat {
                line,
                message: format!("expected `a b c label`, got `{s}`"),
            });
        }
        let bad = |p: &str| GeometryError::MeshFormat {
            line,
            message: format!("bad element field `{p}`"),
        };
        let mut ids = [0usize; 3];
        for k in 0..3 {
            ids[k] = parts[k].parse().map_err(|_| bad(parts[k]))?;
            if ids[k] >= n_nodes {
                return Err(GeometryError::MeshFormat {
                    line,
                    message: format!("node index {} out of range", ids[k]),
                });
            }
        }
        elements.push(ids);
        labels.push(match parts[3] {
            "L" => SubdomainLabel::Lens,
            "F" => SubdomainLabel::Fluid,
            other => return Err(bad(other)),
        });
    }

    let mut interface_edges = Vec::with_capacity(n_gamma);
    for _ in 0..n_gamma {
        let (line, s) = next_line("interface record")?;
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(GeometryError::MeshFormat {
                line,
                message: format!("expected `a b lens_element fluid_element`, got `{s}`"),
            });
        }
        let bad = |p: &str| GeometryError::MeshFormat {
            line,
            message: format!("bad interface field `{p}`"),
        };
        let mut ids = [0usize; 4];
        for k in 0..4 {
            ids[k] = parts[k].parse().map_err(|_| bad(parts[k]))?;
        }
        interface_edges.push(InterfaceEdge {
            nodes: [ids[0], ids[1]],
            lens_element: ids[2],
            fluid_element: ids[3],
        });
    }

    Ok(Mesh2D {
        nodes,
        elements,
        labels,
        boundary_node,
        interface_edges,
        domain,
        mesh_size,
    })
}
