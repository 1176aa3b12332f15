//! Small fixed-size linear algebra helpers for planar problems.
//!
//! Everything in the solver pipeline works with 2-vectors and 2×2 matrices
//! (gradients of P1 fields, Jacobians of displacement fields), so we keep a
//! handful of free functions here instead of pulling in a matrix library.

/// Planar vector.
pub type Vec2 = [f64; 2];

/// 2×2 matrix, row-major: `m[i][j]` is row `i`, column `j`.
pub type Mat2 = [[f64; 2]; 2];

/// Identity matrix.
pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

/// Dot product.
#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Euclidean norm.
#[inline]
pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

/// `a - b`.
#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// `a + b`.
#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

/// `s * a`.
#[inline]
pub fn scale(s: f64, a: Vec2) -> Vec2 {
    [s * a[0], s * a[1]]
}

/// `a + s * b`, the common axpy form.
#[inline]
pub fn axpy(a: Vec2, s: f64, b: Vec2) -> Vec2 {
    [a[0] + s * b[0], a[1] + s * b[1]]
}

/// Matrix-vector product `m v`.
#[inline]
pub fn matvec(m: &Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Transposed matrix-vector product `mᵀ v`.
#[inline]
pub fn matvec_t(m: &Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[1][0] * v[1],
        m[0][1] * v[0] + m[1][1] * v[1],
    ]
}

/// Outer product `a bᵀ`.
#[inline]
pub fn outer(a: Vec2, b: Vec2) -> Mat2 {
    [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]]
}

/// Matrix product `a b`.
#[inline]
pub fn matmul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Transpose.
#[inline]
pub fn transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

/// Determinant.
#[inline]
pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Inverse; caller guarantees `det(m) != 0`.
#[inline]
pub fn inverse(m: &Mat2) -> Mat2 {
    let d = det(m);
    [
        [m[1][1] / d, -m[0][1] / d],
        [-m[1][0] / d, m[0][0] / d],
    ]
}

/// Frobenius contraction `a : b = Σ aᵢⱼ bᵢⱼ`.
#[inline]
pub fn contract(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

/// Entrywise `a + s * b`.
#[inline]
pub fn mat_axpy(a: &Mat2, s: f64, b: &Mat2) -> Mat2 {
    [
        [a[0][0] + s * b[0][0], a[0][1] + s * b[0][1]],
        [a[1][0] + s * b[1][0], a[1][1] + s * b[1][1]],
    ]
}

/// Spectral norm (largest singular value) of a 2×2 matrix.
///
/// Computed from the eigenvalues of `mᵀm` in closed form; exact up to
/// rounding, no iteration involved.
pub fn spectral_norm(m: &Mat2) -> f64 {
    let g = matmul(&transpose(m), m);
    // Symmetric 2×2 eigenvalues: mean ± radius.
    let half_trace = 0.5 * (g[0][0] + g[1][1]);
    let det_g = det(&g);
    let radius_sq = (half_trace * half_trace - det_g).max(0.0);
    (half_trace + radius_sq.sqrt()).max(0.0).sqrt()
}
