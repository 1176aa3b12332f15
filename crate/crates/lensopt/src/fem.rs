//! Finite element infrastructure: P1 triangle calculus, sparse matrices,
//! and serial iterative solvers.
//!
//! Fields are continuous piecewise-linear (P1) on a conforming triangle
//! mesh.  Gradients of P1 fields are constant per element, which the
//! nonlinear damping kernels rely on: the q-Laplace flux of a P1 rate field
//! is evaluated exactly, once per element.  Mass-type integrals use the
//! three-point edge-midpoint rule, which is exact for quadratics and hence
//! reproduces the exact consistent P1 mass matrix.
//!
//! Determinism policy: element-local computations may run in parallel (see
//! [`Parallelism`]), but results are collected in element order and
//! scattered serially, and the Krylov solvers are serial, so every result
//! is bit-identical across thread counts.

use thiserror::Error;

use crate::la::{self, Mat2, Vec2};

/// Per-element geometry of a P1 triangle: area and the (constant) gradients
/// of the three nodal basis functions.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    /// Triangle area (positive for counterclockwise node order).
    pub area: f64,
    /// `grad[i]` is ∇φᵢ for the local node `i`.
    pub grad: [Vec2; 3],
}

/// Geometry of the triangle with vertices `p`.
pub fn element_geometry(p: [Vec2; 3]) -> ElementGeometry {
    let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
        - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * two_a;
    // ∇φᵢ = rot90(p_{i+2} − p_{i+1}) / (2A), with rot90(v) = (−v_y, v_x).
    let mut grad = [[0.0; 2]; 3];
    for i in 0..3 {
        let a = p[(i + 1) % 3];
        let b = p[(i + 2) % 3];
        grad[i] = [(a[1] - b[1]) / two_a, (b[0] - a[0]) / two_a];
    }
    ElementGeometry { area, grad }
}

/// Signed area of a triangle (positive when counterclockwise).
pub fn signed_area(p: [Vec2; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
        - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

/// Gradient of the P1 field with nodal values `v` on an element with
/// geometry `geo`.
#[inline]
pub fn p1_gradient(geo: &ElementGeometry, v: [f64; 3]) -> Vec2 {
    let mut g = [0.0, 0.0];
    for i in 0..3 {
        g = la::axpy(g, v[i], geo.grad[i]);
    }
    g
}

/// Values of a P1 field at the three edge midpoints; midpoint `k` is the
/// one opposite local node `k`.
#[inline]
pub fn midpoint_values(v: [f64; 3]) -> [f64; 3] {
    [
        0.5 * (v[1] + v[2]),
        0.5 * (v[2] + v[0]),
        0.5 * (v[0] + v[1]),
    ]
}

/// `BASIS_AT_MIDPOINTS[k][i]` = φᵢ at the midpoint opposite node `k`.
pub const BASIS_AT_MIDPOINTS: [[f64; 3]; 3] = [
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
];

/// Local matrix of the weighted mass form ∫_K w φᵢ φⱼ with a P1 weight
/// given by its midpoint values, integrated by the edge-midpoint rule
/// (exact for quadratics; exact consistent mass matrix for w ≡ 1).
pub fn local_mass(area: f64, weight_at_midpoints: [f64; 3]) -> [[f64; 3]; 3] {
    let scale = area / 3.0;
    let mut m = [[0.0; 3]; 3];
    for k in 0..3 {
        let wk = scale * weight_at_midpoints[k];
        for i in 0..3 {
            let bi = BASIS_AT_MIDPOINTS[k][i];
            if bi == 0.0 {
                continue;
            }
            for j in 0..3 {
                m[i][j] += wk * bi * BASIS_AT_MIDPOINTS[k][j];
            }
        }
    }
    m
}

/// Local load vector of ∫_K w φᵢ with `w` given at the edge midpoints.
pub fn local_load(area: f64, weight_at_midpoints: [f64; 3]) -> [f64; 3] {
    let scale = area / 3.0;
    let mut r = [0.0; 3];
    for k in 0..3 {
        for i in 0..3 {
            r[i] += scale * weight_at_midpoints[k] * BASIS_AT_MIDPOINTS[k][i];
        }
    }
    r
}

/// Local matrix of the anisotropic stiffness form ∫_K (B ∇φⱼ)·∇φᵢ for a
/// constant 2×2 tensor `B` (use the identity scaled by a coefficient for
/// isotropic terms).
pub fn local_stiffness(geo: &ElementGeometry, b: &Mat2) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for j in 0..3 {
        let bg = la::matvec(b, geo.grad[j]);
        for i in 0..3 {
            m[i][j] = geo.area * la::dot(geo.grad[i], bg);
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Sparse matrices
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix over a fixed symmetric sparsity pattern.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix whose pattern is the node-adjacency of `elements`
    /// (including the diagonal).
    pub fn from_elements(n_nodes: usize, elements: &[[usize; 3]]) -> Self {
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        for el in elements {
            for &i in el {
                for &j in el {
                    neighbors[i].push(j);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n_nodes + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.push(i);
            list.sort_unstable();
            list.dedup();
            col_idx.extend_from_slice(list);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        Self { n: n_nodes, row_ptr, col_idx, values }
    }

    /// Matrix dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Set all stored entries to zero, keeping the pattern.
    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn index_of(&self, i: usize, j: usize) -> usize {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        let pos = self.col_idx[lo..hi]
            .binary_search(&j)
            .expect("entry outside the assembled sparsity pattern");
        lo + pos
    }

    /// Add `v` to entry (i, j); the pair must lie in the pattern.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index_of(i, j);
        self.values[idx] += v;
    }

    /// Entry (i, j), or zero when outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    /// Diagonal entries.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Impose homogeneous Dirichlet rows symmetrically: zero the marked
    /// rows and columns and put 1 on their diagonals.  Valid for zero
    /// boundary values, where no right-hand-side correction is needed
    /// beyond zeroing the marked entries.
    pub fn apply_dirichlet(&mut self, constrained: &[bool]) {
        assert_eq!(constrained.len(), self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if constrained[i] || constrained[j] {
                    self.values[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Scatter a local 3×3 block and load into the global matrix and
    /// right-hand side.
    pub fn scatter(
        &mut self,
        rhs: &mut [f64],
        nodes: [usize; 3],
        local_matrix: &[[f64; 3]; 3],
        local_rhs: &[f64; 3],
    ) {
        for i in 0..3 {
            rhs[nodes[i]] += local_rhs[i];
            for j in 0..3 {
                if local_matrix[i][j] != 0.0 {
                    self.add(nodes[i], nodes[j], local_matrix[i][j]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Iterative solvers
// ---------------------------------------------------------------------------

/// Convergence report of an iterative solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    /// Iterations taken.
    pub iterations: usize,
    /// Final residual 2-norm.
    pub residual: f64,
}

/// An iterative solver failed to reach tolerance.
#[derive(Debug, Clone, Error)]
#[error("{method} stalled after {iterations} iterations (residual {residual:.3e})")]
pub struct IterativeFailure {
    /// Solver name.
    pub method: &'static str,
    /// Iterations performed before giving up.
    pub iterations: usize,
    /// Residual 2-norm at failure.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean inner product of two nodal vectors.
pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Maximum absolute entry.
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive
/// definite systems; `x` carries the initial guess in and the solution out.
pub fn conjugate_gradient(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iter: usize,
) -> Result<SolveStats, IterativeFailure> {
    let n = a.n();
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let target = tol_rel * norm2(b).max(1e-300);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let res = norm2(&r);
        if res <= target || res == 0.0 {
            return Ok(SolveStats { iterations: it, residual: res });
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(IterativeFailure { method: "cg", iterations: it, residual: res });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = norm2(&r);
    if res <= target {
        Ok(SolveStats { iterations: max_iter, residual: res })
    } else {
        Err(IterativeFailure { method: "cg", iterations: max_iter, residual: res })
    }
}

/// Jacobi-preconditioned BiCGSTAB for general square systems; `x` carries
/// the initial guess in and the solution out.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iter: usize,
) -> Result<SolveStats, IterativeFailure> {
    let n = a.n();
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let target = tol_rel * norm2(b).max(1e-300);
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..max_iter {
        let res = norm2(&r);
        if res <= target || res == 0.0 {
            return Ok(SolveStats { iterations: it, residual: res });
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            return Err(IterativeFailure { method: "bicgstab", iterations: it, residual: res });
        }
        if it == 0 {
            p.copy_from_slice(&r);
        } else {
            let beta = (rho_new / rho) * (alpha / omega);
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
        }
        rho = rho_new;
        for i in 0..n {
            phat[i] = p[i] * inv_diag[i];
        }
        a.matvec(&phat, &mut v);
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return Err(IterativeFailure { method: "bicgstab", iterations: it, residual: res });
        }
        alpha = rho / r0v;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok(SolveStats { iterations: it + 1, residual: norm2(&s) });
        }
        for i in 0..n {
            shat[i] = s[i] * inv_diag[i];
        }
        a.matvec(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(IterativeFailure { method: "bicgstab", iterations: it, residual: res });
        }
        omega = dot(&t, &s) / tt;
        if omega == 0.0 {
            return Err(IterativeFailure { method: "bicgstab", iterations: it, residual: res });
        }
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    let res = norm2(&r);
    if res <= target {
        Ok(SolveStats { iterations: max_iter, residual: res })
    } else {
        Err(IterativeFailure { method: "bicgstab", iterations: max_iter, residual: res })
    }
}

/// Preconditioned MINRES for symmetric (possibly indefinite) systems; `x`
/// carries the initial guess in and the solution out.  Preconditioned with
/// the absolute-value diagonal, which stays positive definite even when the
/// matrix is not.  Used as the robust fallback when BiCGSTAB breaks down on
/// stiff adjoint steps.
pub fn minres(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iter: usize,
) -> Result<SolveStats, IterativeFailure> {
    let n = a.n();
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d.abs() } else { 1.0 })
        .collect();
    let target = tol_rel * norm2(b).max(1e-300);
    let true_residual = |x: &[f64], scratch: &mut Vec<f64>| -> f64 {
        a.matvec(x, scratch);
        scratch
            .iter()
            .zip(b)
            .map(|(ax, bi)| (bi - ax) * (bi - ax))
            .sum::<f64>()
            .sqrt()
    };
    let mut scratch = vec![0.0; n];

    let mut r1 = vec![0.0; n];
    a.matvec(x, &mut r1);
    for i in 0..n {
        r1[i] = b[i] - r1[i];
    }
    let mut y: Vec<f64> = r1.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let beta1 = dot(&r1, &y);
    if beta1 <= 0.0 {
        let res = norm2(&r1);
        return if res <= target {
            Ok(SolveStats { iterations: 0, residual: res })
        } else {
            Err(IterativeFailure { method: "minres", iterations: 0, residual: res })
        };
    }
    let beta1 = beta1.sqrt();

    // Paige-Saunders recurrences with Givens rotations.
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut r2 = r1.clone();
    let mut v = vec![0.0; n];
    let mut check_at = target;

    for it in 1..=max_iter {
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        a.matvec(&v, &mut y);
        if it >= 2 {
            let c = beta / oldb;
            for i in 0..n {
                y[i] -= c * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        let c = alfa / beta;
        for i in 0..n {
            y[i] -= c * r2[i];
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        for i in 0..n {
            y[i] = r2[i] * inv_diag[i];
        }
        oldb = beta;
        let beta_sq = dot(&r2, &y);
        if beta_sq < 0.0 {
            let res = true_residual(x, &mut scratch);
            return Err(IterativeFailure { method: "minres", iterations: it, residual: res });
        }
        beta = beta_sq.sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        std::mem::swap(&mut w2, &mut w);
        // w := (v − oldeps·w1 − delta·w2) / gamma, where w1 is the vector
        // two steps back (now living in `w` after the swap).
        for i in 0..n {
            w[i] = (v[i] - oldeps * w[i] - delta * w2[i]) * denom;
        }
        for i in 0..n {
            x[i] += phi * w[i];
        }
        // phibar tracks the preconditioned residual norm; confirm against
        // the true residual before declaring victory, and back off
        // geometrically when the scales disagree.
        if phibar <= check_at {
            let res = true_residual(x, &mut scratch);
            if res <= target {
                return Ok(SolveStats { iterations: it, residual: res });
            }
            check_at = 0.5 * phibar;
        }
    }
    let res = true_residual(x, &mut scratch);
    if res <= target {
        Ok(SolveStats { iterations: max_iter, residual: res })
    } else {
        Err(IterativeFailure { method: "minres", iterations: max_iter, residual: res })
    }
}

// ---------------------------------------------------------------------------
// Deterministic parallelism
// ---------------------------------------------------------------------------

/// Deterministic element-loop parallelism.
///
/// Holds a private rayon pool (or none for serial execution).  The only
/// operation is an index-ordered map: per-index results are computed
/// independently — possibly in parallel — and collected in index order, so
/// downstream serial reductions see an order independent of thread count
/// and results are bit-stable.
pub struct Parallelism {
    pool: Option<rayon::ThreadPool>,
}

impl Parallelism {
    /// Run element loops on `threads` workers; `threads <= 1` means serial.
    pub fn new(threads: usize) -> Self {
        if threads <= 1 {
            return Self { pool: None };
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("building a thread pool cannot fail with a fixed size");
        Self { pool: Some(pool) }
    }

    /// Serial execution.
    pub fn serial() -> Self {
        Self { pool: None }
    }

    /// Map `f` over `0..n`, collecting results in index order.
    pub fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| (0..n).into_par_iter().map(f).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_triangle() -> ElementGeometry {
        element_geometry([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    }

    #[test]
    fn basis_gradients_partition_of_unity() {
        let geo = element_geometry([[0.2, 0.1], [1.4, 0.3], [0.5, 1.2]]);
        // Gradients sum to zero and reproduce linear fields exactly.
        let sum = [
            geo.grad[0][0] + geo.grad[1][0] + geo.grad[2][0],
            geo.grad[0][1] + geo.grad[1][1] + geo.grad[2][1],
        ];
        assert!(la::norm(sum) < 1e-14);
        let f = |p: Vec2| 3.0 * p[0] - 2.0 * p[1] + 0.5;
        let v = [f([0.2, 0.1]), f([1.4, 0.3]), f([0.5, 1.2])];
        let g = p1_gradient(&geo, v);
        assert_relative_eq!(g[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(g[1], -2.0, max_relative = 1e-12);
    }

    #[test]
    fn midpoint_rule_reproduces_consistent_mass_matrix() {
        // For w ≡ 1 the edge-midpoint rule integrates φᵢφⱼ exactly:
        // A/6 on the diagonal, A/12 off it.
        let geo = reference_triangle();
        let m = local_mass(geo.area, [1.0, 1.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { geo.area / 6.0 } else { geo.area / 12.0 };
                assert_relative_eq!(m[i][j], expect, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn midpoint_rule_exact_for_quadratics() {
        // ∫ over the reference triangle of x² = 1/12; the rule must hit it.
        let geo = reference_triangle();
        let xs = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]].map(|p: Vec2| p[0]);
        let x_mid = midpoint_values(xs);
        let integral: f64 = (0..3).map(|k| geo.area / 3.0 * x_mid[k] * x_mid[k]).sum();
        assert_relative_eq!(integral, 1.0 / 12.0, max_relative = 1e-14);
    }

    /// Two-triangle unit square, all four corner nodes.
    fn square_mesh() -> (Vec<Vec2>, Vec<[usize; 3]>) {
        let nodes = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let elements = vec![[0, 1, 2], [0, 2, 3]];
        (nodes, elements)
    }

    fn assemble_stiffness_plus_mass(nodes: &[Vec2], elements: &[[usize; 3]]) -> CsrMatrix {
        let mut a = CsrMatrix::from_elements(nodes.len(), elements);
        let mut rhs = vec![0.0; nodes.len()];
        for el in elements {
            let geo = element_geometry([nodes[el[0]], nodes[el[1]], nodes[el[2]]]);
            let k = local_stiffness(&geo, &la::IDENTITY);
            let m = local_mass(geo.area, [1.0; 3]);
            let mut local = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    local[i][j] = k[i][j] + m[i][j];
                }
            }
            a.scatter(&mut rhs, *el, &local, &[0.0; 3]);
        }
        a
    }

    #[test]
    fn cg_matches_dense_solve() {
        let (nodes, elements) = square_mesh();
        let a = assemble_stiffness_plus_mass(&nodes, &elements);
        let b = vec![1.0, -2.0, 0.5, 3.0];
        let mut x = vec![0.0; 4];
        conjugate_gradient(&a, &b, &mut x, 1e-14, 200).unwrap();

        let dense = nalgebra::DMatrix::from_fn(4, 4, |i, j| a.get(i, j));
        let rhs = nalgebra::DVector::from_column_slice(&b);
        let expect = dense.lu().solve(&rhs).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x[i], expect[i], max_relative = 1e-10);
        }
    }

    #[test]
    fn bicgstab_matches_dense_solve_on_nonsymmetric_system() {
        let (nodes, elements) = square_mesh();
        let mut a = assemble_stiffness_plus_mass(&nodes, &elements);
        // Break symmetry the way convective/zeroth-order couplings do.
        a.add(0, 1, 0.3);
        a.add(2, 3, -0.2);
        let b = vec![0.25, 1.0, -1.0, 2.0];
        let mut x = vec![0.0; 4];
        bicgstab(&a, &b, &mut x, 1e-14, 200).unwrap();

        let dense = nalgebra::DMatrix::from_fn(4, 4, |i, j| a.get(i, j));
        let rhs = nalgebra::DVector::from_column_slice(&b);
        let expect = dense.lu().solve(&rhs).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x[i], expect[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn minres_solves_a_symmetric_indefinite_system() {
        // Stiffness+mass shifted far enough to flip some eigenvalues:
        // symmetric indefinite, the regime BiCGSTAB can break down in.
        let (nodes, elements) = square_mesh();
        let mut a = assemble_stiffness_plus_mass(&nodes, &elements);
        for i in 0..4 {
            let d = a.get(i, i);
            a.add(i, i, -1.2 * d);
        }
        let b = vec![0.6, -1.5, 2.0, 0.1];
        let mut x = vec![0.0; 4];
        minres(&a, &b, &mut x, 1e-12, 400).unwrap();

        let dense = nalgebra::DMatrix::from_fn(4, 4, |i, j| a.get(i, j));
        let rhs = nalgebra::DVector::from_column_slice(&b);
        let expect = dense.lu().solve(&rhs).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x[i], expect[i], max_relative = 1e-8);
        }
    }

    #[test]
    fn minres_agrees_with_cg_on_a_definite_system() {
        let (nodes, elements) = square_mesh();
        let a = assemble_stiffness_plus_mass(&nodes, &elements);
        let b = vec![1.0, -2.0, 0.5, 3.0];
        let mut x_cg = vec![0.0; 4];
        conjugate_gradient(&a, &b, &mut x_cg, 1e-14, 200).unwrap();
        let mut x_mr = vec![0.0; 4];
        minres(&a, &b, &mut x_mr, 1e-14, 400).unwrap();
        for i in 0..4 {
            assert_relative_eq!(x_mr[i], x_cg[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn dirichlet_rows_pin_values() {
        let (nodes, elements) = square_mesh();
        let mut a = assemble_stiffness_plus_mass(&nodes, &elements);
        let constrained = vec![true, false, false, true];
        a.apply_dirichlet(&constrained);
        for i in [0usize, 3] {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(a.get(i, j), expect);
                assert_eq!(a.get(j, i), expect);
            }
        }
        let b = vec![0.0, 1.0, 1.0, 0.0];
        let mut x = vec![0.0; 4];
        conjugate_gradient(&a, &b, &mut x, 1e-13, 100).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(x[3], 0.0);
    }

    #[test]
    fn parallel_map_is_bit_stable_across_thread_counts() {
        // A mildly irregular per-index computation; any reassociation of
        // the arithmetic would show up as bit differences.
        let work = |i: usize| {
            let mut acc = 0.0_f64;
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            for _ in 0..50 {
                acc += rng.gen_range(-1.0..1.0_f64).sin();
            }
            acc
        };
        let serial = Parallelism::serial().map(1000, work);
        for threads in [2, 4, 8] {
            let parallel = Parallelism::new(threads).map(1000, work);
            assert!(
                serial.iter().zip(&parallel).all(|(a, b)| a.to_bits() == b.to_bits()),
                "map with {threads} threads diverged from serial"
            );
        }
    }
}
