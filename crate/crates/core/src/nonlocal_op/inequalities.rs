//! Randomized check of the scalar monotonicity inequalities for `Φ_p`:
//!
//! ```text
//! |Φ_p(ξ) - Φ_p(η)|        ≤ c1 |ξ-η| (|ξ|+|η|)^{p-2}   (p ≥ 2)
//!                          ≤ c1 |ξ-η|^{p-1}             (p ≤ 2)
//! (Φ_p(ξ) - Φ_p(η))(ξ-η)   ≥ c2 |ξ-η|^p                 (p ≥ 2)
//!                          ≥ c2 |ξ-η|^2 / (|ξ|+|η|)^{2-p} (p ≤ 2)
//! ```
//!
//! Constants: `c1 = p-1` and `c2 = 2^{2-p}` for `p ≥ 2`; `c1 = 2^{2-p}` and
//! `c2 = p-1` for `p ≤ 2`. The `p-1` constants follow from the mean value
//! bound with `Φ_p'(t) = (p-1)|t|^{p-2}`; the `2^{2-p}` ones are attained by
//! the antipodal pair `ξ = -η`.
//!
//! Sampling: magnitudes log-uniform on `[1e-3, 1e3]` with random signs; a
//! quarter of the pairs are near-antipodal, a quarter nearly equal, and one
//! in sixty-four has a zero entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phi;

/// Relative rounding allowance when comparing the two sides.
const SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub p: f64,
    pub samples: usize,
    pub c1: f64,
    pub c2: f64,
    pub violations: usize,
    pub upper_violations: usize,
    pub lower_violations: usize,
    /// Smallest relative margin seen (negative beyond `-1e-12` is a violation).
    pub worst_margin: f64,
}

/// `(c1, c2)` for the given exponent.
pub fn inequality_constants(p: f64) -> (f64, f64) {
    let antipodal = 2f64.powf(2.0 - p);
    if p >= 2.0 {
        (p - 1.0, antipodal)
    } else {
        (antipodal, p - 1.0)
    }
}

fn sides(p: f64, xi: f64, eta: f64) -> (f64, f64, f64, f64) {
    let diff = xi - eta;
    let dphi = phi(p, xi) - phi(p, eta);
    let sum = xi.abs() + eta.abs();
    let (upper_rhs, lower_rhs) = if p >= 2.0 {
        (diff.abs() * sum.powf(p - 2.0), diff.abs().powf(p))
    } else if sum == 0.0 {
        (0.0, 0.0)
    } else {
        (diff.abs().powf(p - 1.0), diff * diff / sum.powf(2.0 - p))
    };
    (dphi.abs(), upper_rhs, dphi * diff, lower_rhs)
}

fn sample_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let magnitude = |rng: &mut ChaCha8Rng| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * 10f64.powf(rng.gen_range(-3.0..3.0))
    };
    let xi = magnitude(rng);
    let kind = rng.gen_range(0..64u32);
    let eta = match kind {
        0 => 0.0,
        1..=16 => -xi * (1.0 + rng.gen_range(-1e-3..1e-3)),
        17..=32 => xi * (1.0 + 10f64.powf(rng.gen_range(-8.0..0.0)) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }),
        _ => magnitude(rng),
    };
    (xi, eta)
}

pub fn check_algebraic_inequalities(p: f64, sample_count: usize, rng_seed: u64) -> InequalityReport {
    let (c1, c2) = inequality_constants(p);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut upper_violations = 0;
    let mut lower_violations = 0;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..sample_count {
        let (xi, eta) = sample_pair(&mut rng);
        let (upper_lhs, upper_rhs, lower_lhs, lower_rhs) = sides(p, xi, eta);
        let bound = c1 * upper_rhs;
        let scale = bound.max(upper_lhs);
        if scale > 0.0 {
            let margin = (bound - upper_lhs) / scale;
            worst_margin = worst_margin.min(margin);
            if margin < -SLACK {
                upper_violations += 1;
            }
        }
        let bound = c2 * lower_rhs;
        let scale = bound.max(lower_lhs);
        if scale > 0.0 {
            let margin = (lower_lhs - bound) / scale;
            worst_margin = worst_margin.min(margin);
            if margin < -SLACK {
                lower_violations += 1;
            }
        }
    }
    InequalityReport {
        p,
        samples: sample_count,
        c1,
        c2,
        violations: upper_violations + lower_violations,
        upper_violations,
        lower_violations,
        worst_margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_at_p_two() {
        for (xi, eta) in [(1.0, -3.0), (0.2, 0.1), (-5.0, 7.5)] {
            let (_, _, lhs, rhs) = sides(2.0, xi, eta);
            assert_eq!(lhs, rhs);
            assert_eq!(lhs, (xi - eta) * (xi - eta));
        }
        assert_eq!(check_algebraic_inequalities(2.0, 10_000, 1).violations, 0);
    }

    #[test]
    fn equal_arguments_give_zero_sides() {
        for p in [1.5, 2.0, 3.0] {
            let (a, b, c, d) = sides(p, 0.7, 0.7);
            assert_eq!((a, b, c, d), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn documented_constants_hold() {
        for p in [1.2, 1.5, 2.0, 2.5, 3.0, 4.0] {
            let report = check_algebraic_inequalities(p, 100_000, 42);
            assert_eq!(report.violations, 0, "{report:?}");
        }
    }

    /// Both sides are homogeneous, so scanning `η` with `ξ = 1` covers every
    /// ratio. The scan validates the constants and finds the antipodal ones
    /// attained.
    #[test]
    fn constants_validated_by_ratio_scan() {
        for p in [1.3, 1.5, 2.5, 3.0] {
            let (c1, c2) = inequality_constants(p);
            let mut best_upper: f64 = 0.0;
            let mut best_lower = f64::INFINITY;
            for k in 0..200_001 {
                let eta = -10.0 + 20.0 * k as f64 / 200_000.0;
                if (eta - 1.0).abs() < 1e-9 {
                    continue;
                }
                let (ul, ur, ll, lr) = sides(p, 1.0, eta);
                best_upper = best_upper.max(ul / ur);
                best_lower = best_lower.min(ll / lr);
            }
            assert!(best_upper <= c1 * (1.0 + 1e-12), "p={p}: {best_upper} vs {c1}");
            assert!(best_lower >= c2 * (1.0 - 1e-12), "p={p}: {best_lower} vs {c2}");
            let antipodal = 2f64.powf(2.0 - p);
            if p < 2.0 {
                assert!((best_upper - antipodal).abs() < 1e-6 * antipodal);
            } else {
                assert!((best_lower - antipodal).abs() < 1e-6 * antipodal);
            }
        }
    }

    #[test]
    fn weaker_constant_is_caught() {
        // c1 = p - 1 fails for p < 2 at antipodal pairs.
        let p = 1.5;
        let (ul, ur, _, _) = sides(p, 1.0, -1.0);
        assert!(ul > (p - 1.0) * ur);
    }
}
