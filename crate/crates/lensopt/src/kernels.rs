//! Pointwise kernels of the q-Laplace damping term and their calculus.
//!
//! The damping flux is g ↦ |g|^{q-1} g with exponent q ≥ 1, optionally
//! regularized through |g|_ε = √(g·g + ε²).  This module provides
//!
//! * the flux and its exact directional linearization
//!   G_g(y) = |g|^{q-1} y + (q−1)|g|^{q-3}(g·y) g,
//! * the rank-one alignment term L(x, y) = |x|^{q-3}(x·y) x that carries the
//!   anisotropic part of the linearization,
//! * a residual check of the segment representation
//!   flux(x) − flux(y) = (x−y)∫₀¹|z(σ)|^{q-1} dσ + (q−1)∫₀¹ L(z(σ), x−y) dσ
//!   with z(σ) = y + σ(x−y), evaluated by Gauss–Legendre quadrature,
//! * numeric oracles for the inequality toolbox used in the well-posedness
//!   and sensitivity estimates (strong monotonicity with constant 2^{1-q},
//!   segment bound, Hölder-type difference bounds in ratio form), and
//! * the sharp constant in the weighted Young inequality
//!   |xy| ≤ ε|x|^r + C(ε, r)|y|^{r/(r-1)}.
//!
//! Everything here is plain pointwise arithmetic; mesh and time stepping
//! never enter.  The solvers call `flux` and `flux_linearized` in their
//! element loops, while the oracle functions exist so the analytical
//! estimates backing the scheme can be spot-checked numerically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::la::{self, Vec2};

/// Errors from kernel evaluations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    /// The linearization |g|^{q-3} factor is singular: requested at g = 0
    /// with ε = 0 and q < 3, where no finite limit exists.
    #[error("flux linearization is singular at g = 0 for q < 3 without regularization")]
    SingularLinearization,
}

/// The regularized norm |g|_ε = √(g·g + ε²).
///
/// ε = 0 reproduces the Euclidean norm.  Solvers run with a small positive ε
/// so the linearization stays bounded near |∇u̇| = 0; the verification
/// oracles run with ε = 0 to probe the unregularized kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedNorm {
    /// Regularization parameter ε ≥ 0.
    pub epsilon: f64,
}

impl RegularizedNorm {
    /// Construct with the given ε ≥ 0.
    pub fn new(epsilon: f64) -> Self {
        assert!(epsilon >= 0.0, "regularization must be nonnegative");
        Self { epsilon }
    }

    /// Exact (unregularized) norm.
    pub fn exact() -> Self {
        Self { epsilon: 0.0 }
    }

    /// |g|_ε.
    #[inline]
    pub fn eval(&self, g: Vec2) -> f64 {
        (la::dot(g, g) + self.epsilon * self.epsilon).sqrt()
    }

    /// |g|_ε^e.  Note `0^0 = 1` under IEEE `powf`, which is the convention
    /// the q = 1 and q = 3 limits rely on.
    #[inline]
    pub fn pow(&self, g: Vec2, e: f64) -> f64 {
        self.eval(g).powf(e)
    }
}

/// Damping flux |g|_ε^{q-1} g.
#[inline]
pub fn flux(g: Vec2, q: f64, reg: RegularizedNorm) -> Vec2 {
    la::scale(reg.pow(g, q - 1.0), g)
}

/// Exact linearization of the flux at base gradient `g` in direction `y`:
///
/// G_g(y) = |g|_ε^{q-1} y + (q−1)|g|_ε^{q-3}(g·y) g.
///
/// Fails with [`KernelError::SingularLinearization`] exactly when the
/// |g|^{q-3} factor has no finite limit: g = 0 with ε = 0 and q < 3.
pub fn flux_linearized(
    g: Vec2,
    y: Vec2,
    q: f64,
    reg: RegularizedNorm,
) -> Result<Vec2, KernelError> {
    if reg.epsilon == 0.0 && g == [0.0, 0.0] && q < 3.0 {
        return Err(KernelError::SingularLinearization);
    }
    let isotropic = la::scale(reg.pow(g, q - 1.0), y);
    if q == 1.0 {
        // The aligned part carries the factor (q−1) = 0; skip it so the
        // |g|^{-2} factor is never materialized.
        return Ok(isotropic);
    }
    let aligned = la::scale((q - 1.0) * reg.pow(g, q - 3.0) * la::dot(g, y), g);
    Ok(la::add(isotropic, aligned))
}

/// Rank-one alignment term L(x, y) = |x|_ε^{q-3}(x·y) x.
///
/// This is the anisotropic half of the flux linearization; the segment
/// representation integrates it along the chord between two gradients.
/// At x = 0 the product convention 0·∞ does not arise for q ≥ 3 (the value
/// is 0); for q < 3 callers keep x away from the origin or use ε > 0.
#[inline]
pub fn alignment_term(x: Vec2, y: Vec2, q: f64, reg: RegularizedNorm) -> Vec2 {
    la::scale(reg.pow(x, q - 3.0) * la::dot(x, y), x)
}

/// Gauss–Legendre nodes and weights on [0, 1].
///
/// Nodes are found by Newton iteration on the Legendre polynomial; for the
/// orders used here (≤ 64) this converges to machine precision in a few
/// steps.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut rule = Vec::with_capacity(n);
    for i in 0..n {
        // Initial guess on [-1, 1], then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map [-1, 1] → [0, 1].
        rule.push((0.5 * (1.0 - x), 0.5 * w));
    }
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Residual of the segment representation of the flux difference,
///
/// ‖ flux(x) − flux(y) − (x−y)∫₀¹|z|^{q-1} dσ − (q−1)∫₀¹ L(z, x−y) dσ ‖,
///
/// with z(σ) = y + σ(x−y) and both integrals evaluated by `n_quad`-point
/// Gauss–Legendre quadrature.  The identity is exact for the regularized
/// kernels as well, so any ε is admissible.  Near-zero chords with q < 3 and
/// ε = 0 make the integrand under-resolved at fixed order; callers keep the
/// chord's distance to the origin a fixed fraction of its length there.
pub fn flux_representation_residual(
    x: Vec2,
    y: Vec2,
    q: f64,
    reg: RegularizedNorm,
    n_quad: usize,
) -> f64 {
    assert!(n_quad >= 8, "representation check needs at least 8 nodes");
    let d = la::sub(x, y);
    let mut isotropic = 0.0;
    let mut aligned = [0.0, 0.0];
    for &(s, w) in &gauss_legendre_unit(n_quad) {
        let z = la::axpy(y, s, d);
        isotropic += w * reg.pow(z, q - 1.0);
        if q != 1.0 {
            aligned = la::axpy(aligned, w, alignment_term(z, d, q, reg));
        }
    }
    let mut rhs = la::scale(isotropic, d);
    rhs = la::axpy(rhs, q - 1.0, aligned);
    la::norm(la::sub(la::sub(flux(x, q, reg), flux(y, q, reg)), rhs))
}

/// Both sides of every inequality in the toolbox, evaluated at one pair of
/// vectors; η is the Hölder interpolation parameter.
///
/// Slack fields are `rhs − lhs` (nonnegative when the inequality holds with
/// the stated constant); ratio fields are `lhs / rhs-without-constant`, the
/// quantity whose supremum over samples is the empirical constant C_q.
#[derive(Debug, Clone, Copy)]
pub struct InequalitySlacks {
    /// (flux(x) − flux(y))·(x − y) − 2^{1-q}|x−y|^{q+1}; ≥ 0 is strong
    /// monotonicity with the sharp antipodal constant.
    pub monotonicity_gap: f64,
    /// min over the chord of |x|^{q-1} + |y|^{q-1} − |z(σ)|^{q-1}; ≥ 0 is
    /// the segment bound.
    pub segment_bound_slack: f64,
    /// |flux(x) − flux(y)| / (|x−y|^{1-η}(|x|^{q-1+η} + |y|^{q-1+η})).
    pub flux_difference_ratio: f64,
    /// ||x|^{q-1} − |y|^{q-1}| / (|x−y|^{1-η}(|x|^{q-1+η} + |y|^{q-1+η})).
    pub norm_difference_ratio: f64,
    /// Ratio form of the alignment-term difference bound: the constant
    /// needed in front of the Hölder group after subtracting the
    /// constant-free group, evaluated at (x, y) against (y, x); may be 0
    /// when the free group already dominates.  Only meaningful for q > 2.
    pub alignment_difference_ratio: f64,
}

/// Evaluate the full inequality toolbox at one pair; see
/// [`InequalitySlacks`] for the conventions.  Uses exact (ε = 0) norms.
pub fn inequality_slacks(x: Vec2, y: Vec2, q: f64, eta: f64) -> InequalitySlacks {
    let reg = RegularizedNorm::exact();
    let d = la::sub(x, y);
    let dn = la::norm(d);
    let xn = la::norm(x);
    let yn = la::norm(y);

    let fd = la::sub(flux(x, q, reg), flux(y, q, reg));
    let monotonicity_gap = la::dot(fd, d) - (2.0_f64).powf(1.0 - q) * dn.powf(q + 1.0);

    // Segment bound, probed on a σ grid; |z(σ)| is convex so the endpoints
    // dominate, but the oracle checks the whole chord anyway.
    let cap = xn.powf(q - 1.0) + yn.powf(q - 1.0);
    let mut segment_bound_slack = f64::INFINITY;
    for i in 0..=32 {
        let s = i as f64 / 32.0;
        let z = la::axpy(y, s, d);
        segment_bound_slack = segment_bound_slack.min(cap - reg.pow(z, q - 1.0));
    }

    let hoelder_group = dn.powf(1.0 - eta) * (xn.powf(q - 1.0 + eta) + yn.powf(q - 1.0 + eta));
    let flux_difference_ratio = if hoelder_group > 0.0 {
        la::norm(fd) / hoelder_group
    } else {
        0.0
    };
    let norm_difference_ratio = if hoelder_group > 0.0 {
        (xn.powf(q - 1.0) - yn.powf(q - 1.0)).abs() / hoelder_group
    } else {
        0.0
    };

    // Alignment difference |L(x, y) − L(y, x)| against
    //   C|x−y|^{1-η}(|x|^{q-3+η} + |y|^{q-3+η})|x||y|
    //     + |y|^{q-2}(|y−x||x| + |x||x−y|).
    let alignment_difference_ratio = if q > 2.0 && xn > 0.0 && yn > 0.0 {
        let lhs = la::norm(la::sub(
            alignment_term(x, y, q, reg),
            alignment_term(y, x, q, reg),
        ));
        let with_constant =
            dn.powf(1.0 - eta) * (xn.powf(q - 3.0 + eta) + yn.powf(q - 3.0 + eta)) * xn * yn;
        let constant_free = yn.powf(q - 2.0) * (dn * xn + xn * dn);
        if with_constant > 0.0 {
            ((lhs - constant_free) / with_constant).max(0.0)
        } else {
            0.0
        }
    } else {
        0.0
    };

    InequalitySlacks {
        monotonicity_gap,
        segment_bound_slack,
        flux_difference_ratio,
        norm_difference_ratio,
        alignment_difference_ratio,
    }
}

/// Empirical constant search: the largest ratio observed over `n_samples`
/// seeded pairs with coordinates in [-r, r].  Returns the suprema of the
/// flux-difference, norm-difference, and alignment ratios.
pub fn ratio_constant_search(
    q: f64,
    eta: f64,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..n_samples {
        let p: Vec2 = [rng.gen_range(-radius..radius), rng.gen_range(-radius..radius)];
        let r: Vec2 = [rng.gen_range(-radius..radius), rng.gen_range(-radius..radius)];
        let s = inequality_slacks(p, r, q, eta);
        sup.0 = sup.0.max(s.flux_difference_ratio);
        sup.1 = sup.1.max(s.norm_difference_ratio);
        sup.2 = sup.2.max(s.alignment_difference_ratio);
    }
    sup
}

/// Smallest constant C(ε, r) with |xy| ≤ ε|x|^r + C(ε, r)|y|^{r/(r-1)}
/// for all x, y, namely C(ε, r) = (r−1) · r^{-r/(r-1)} · ε^{-1/(r-1)}.
///
/// Sanity anchors: C(1, 2) = 1/4 and C(1/2, 2) = 1/2, the familiar
/// ab ≤ εa² + b²/(4ε) constants.
pub fn young_constant(epsilon: f64, r: f64) -> f64 {
    assert!(epsilon > 0.0 && r > 1.0, "Young constant needs ε > 0, r > 1");
    (r - 1.0) * r.powf(-r / (r - 1.0)) * epsilon.powf(-1.0 / (r - 1.0))
}

/// Numeric oracle for [`young_constant`]: maximize a − ε a^r over a > 0 by
/// ternary search (the objective is concave).  By homogeneity this equals
/// the supremum of (ab − ε a^r)/b^{r/(r-1)} over both variables.
pub fn young_constant_search(epsilon: f64, r: f64) -> f64 {
    assert!(epsilon > 0.0 && r > 1.0);
    let objective = |a: f64| a - epsilon * a.powf(r);
    // Bracket the maximizer: objective is positive then negative.
    let mut hi = 1.0;
    while objective(hi) > 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if objective(m1) < objective(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    objective(0.5 * (lo + hi))
}
