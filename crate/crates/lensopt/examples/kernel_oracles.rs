//! Exercise the three analytic facts about the damping flux g ↦ |g|^{q−1}g
//! that the solver and gradient lean on, each against an independent
//! computation: the line-integral representation of flux differences, the
//! monotonicity inequality with its sharp constant, and the weighted
//! product-splitting bound.
//!
//! Run with `cargo run --example kernel_oracles`.

use lensopt::kernels::{
    flux, flux_representation_residual, inequality_slacks, ratio_constant_search,
    young_constant, young_constant_search, RegularizedNorm,
};
use lensopt::la;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let exact = RegularizedNorm::exact();

    // Line-integral representation of flux differences.
    let mut max_res = 0.0_f64;
    for &q in &[2.0, 3.0, 4.5] {
        let mut checked = 0;
        while checked < 300 {
            let x: la::Vec2 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let y: la::Vec2 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            // The integrand has a branch point at the origin; skip chords
            // passing too close for the fixed-order quadrature.
            let chord = la::sub(x, y);
            let len2 = la::dot(chord, chord);
            let t = (-la::dot(y, chord) / len2.max(1e-300)).clamp(0.0, 1.0);
            if la::norm(la::axpy(y, t, chord)) < 0.15 * len2.sqrt() + 0.05 {
                continue;
            }
            let res = flux_representation_residual(x, y, q, exact, 64);
            let scale = la::norm(flux(x, q, exact)) + la::norm(flux(y, q, exact)) + 1.0;
            max_res = max_res.max(res / scale);
            checked += 1;
        }
    }
    println!("representation formula: max scaled residual {max_res:.3e} over 900 pairs");
    assert!(max_res <= 1e-8, "observed {max_res:.3e}");

    // Monotonicity with the sharp constant, attained on antipodal pairs.
    let mut worst = f64::INFINITY;
    for &q in &[1.0, 2.0, 3.0] {
        for _ in 0..3000 {
            let x: la::Vec2 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let y: la::Vec2 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let s = inequality_slacks(x, y, q, 0.0);
            worst = worst.min(s.monotonicity_gap / la::norm(la::sub(x, y)).powf(q + 1.0).max(1.0));
        }
        let x: la::Vec2 = [0.9, -0.4];
        let s = inequality_slacks(x, la::scale(-1.0, x), q, 0.0);
        let scale = la::norm(la::scale(2.0, x)).powf(q + 1.0);
        println!(
            "monotonicity q = {q}: antipodal gap {:.3e} (scale {scale:.3e})",
            s.monotonicity_gap
        );
        assert!(s.monotonicity_gap.abs() <= 1e-12 * scale, "antipodal pairs attain equality");
    }
    println!("monotonicity: worst normalized gap {worst:.3e} over 9000 pairs");
    assert!(worst >= -1e-12, "observed {worst:.3e}");

    // Empirical suprema of the three comparison ratios.
    for &q in &[1.5, 3.0] {
        let (flux_ratio, norm_ratio, alignment_ratio) =
            ratio_constant_search(q, 0.0, 3.0, 20_000, 11);
        println!(
            "ratio suprema at q = {q}: flux {flux_ratio:.6}, norm {norm_ratio:.6}, \
             alignment {alignment_ratio:.6}"
        );
    }

    // Weighted product splitting: closed form against direct maximization.
    let mut max_dev = 0.0_f64;
    for _ in 0..30 {
        let eps = rng.gen_range(1e-2..5.0);
        let r = rng.gen_range(1.2..4.0);
        let dev = (young_constant(eps, r) - young_constant_search(eps, r)).abs();
        max_dev = max_dev.max(dev / (1.0 + young_constant(eps, r)));
    }
    println!("product splitting: max relative deviation {max_dev:.3e} over 30 (ε, r) pairs");
    assert!(max_dev <= 1e-8, "observed {max_dev:.3e}");
}
