//! Built-in invariant suite: homogeneity, gradient checks, algebraic
//! inequalities and accretivity.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, LambdaInput};
use super::runner::build_problem;
use crate::elliptic::{energy_j, grad_j, Problem};
use crate::error::Result;
use crate::grid::{build_absorption, build_grid, DomainSpec, Field};
use crate::nonlocal_op::{check_algebraic_inequalities, NonlocalOperator, OperatorParams};
use crate::parabolic::accretivity_suite;

/// Relative tolerance of the homogeneity check.
pub const HOMOGENEITY_TOL: f64 = 1e-12;
/// Relative tolerance of the finite-difference gradient checks.
pub const GRADIENT_TOL: f64 = 1e-6;
/// Absolute slack of the contraction and order checks.
pub const ACCRETIVITY_TOL: f64 = 1e-8;
/// Resolvent parameter of the accretivity pairs.
pub const ACCRETIVITY_DELTA: f64 = 0.1;
const DIRECTIONS: usize = 8;

/// Independent generator for check family `family`, exponent slot `slot`.
fn stream(seed: u64, family: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(family * 64 + slot);
    rng
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Worst relative error of `apply(c u) = c^{p-1} apply(u)` over `samples` draws.
pub fn homogeneity_errors(op: &NonlocalOperator, samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = op.len();
    let p = op.p();
    let mut lu = vec![0.0; n];
    let mut lcu = vec![0.0; n];
    (0..samples)
        .map(|_| {
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = 10f64.powf(rng.gen_range(-2.0..2.0));
            let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
            op.apply_compact(&u, &mut lu);
            op.apply_compact(&cu, &mut lcu);
            let factor = c.powf(p - 1.0);
            let expected: Vec<f64> = lu.iter().map(|x| factor * x).collect();
            let err = lcu.iter().zip(&expected).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            err / max_abs(&expected)
        })
        .collect()
}

fn relative_gap(numeric: f64, exact: f64) -> f64 {
    (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(f64::MIN_POSITIVE)
}

/// Central-difference checks of `grad (A/p) = h^d L u` and of `grad J`
/// along random directions; returns the relative errors.
pub fn gradient_errors(pb: &Problem, directions: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let op = pb.op();
    let grid = op.grid();
    let nodes = op.active_nodes();
    let n = op.len();
    let p = op.p();
    let volume = op.cell_volume();
    let mut errors = Vec::with_capacity(2 * directions);
    for _ in 0..directions {
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-5;
        let shifted = |t: f64| -> Vec<f64> { u.iter().zip(&d).map(|(a, b)| a + t * b).collect() };

        let mut lu = vec![0.0; n];
        op.apply_compact(&u, &mut lu);
        let exact: f64 = volume * lu.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        let numeric = (op.energy_compact(&shifted(eps)) - op.energy_compact(&shifted(-eps))) / (2.0 * eps * p);
        errors.push(relative_gap(numeric, exact));

        let field = |v: &[f64]| Field::from_compact(grid, nodes, v);
        let g = grad_j(pb, &field(&u))?;
        let exact: f64 = g.gather(nodes).iter().zip(&d).map(|(a, b)| a * b).sum();
        let numeric = (energy_j(pb, &field(&shifted(eps)))? - energy_j(pb, &field(&shifted(-eps)))?) / (2.0 * eps);
        errors.push(relative_gap(numeric, exact));
    }
    Ok(errors)
}

fn worst(errors: &[f64]) -> f64 {
    errors.iter().fold(0.0f64, |m, &x| m.max(x))
}

/// Runs the whole suite; the report carries pass counts per family.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<Value> {
    let v = &cfg.verify;
    let s = cfg.operator.s;
    let spec = cfg.grid.domain_spec()?;
    let grid = build_grid(&spec)?;
    let mut passed = 0usize;
    let mut total = 0usize;

    let mut homogeneity = Vec::new();
    for (k, &p) in v.exponents.iter().enumerate() {
        let op = NonlocalOperator::assemble(&grid, OperatorParams::new(s, p)?)?;
        let errors = homogeneity_errors(&op, v.homogeneity_samples, &mut stream(cfg.seed, 1, k as u64));
        let ok = errors.iter().filter(|&&e| e < HOMOGENEITY_TOL).count();
        passed += ok;
        total += errors.len();
        homogeneity.push(json!({ "p": p, "samples": errors.len(), "passed": ok, "worst_error": worst(&errors) }));
    }

    let small = build_grid(&DomainSpec::interval((-1.0, 1.0), (-0.4, 0.4), v.gradient_nodes))?;
    let b = build_absorption(&small, cfg.problem.b0)?;
    let lambda = match cfg.problem.lambda {
        LambdaInput::Value(x) => x,
        LambdaInput::Relative { .. } => 1.0,
    };
    let mut gradient = Vec::new();
    for (k, &p) in v.exponents.iter().enumerate() {
        let op = Arc::new(NonlocalOperator::assemble(&small, OperatorParams::new(s, p)?)?);
        let r = if cfg.problem.r > p - 1.0 { cfg.problem.r } else { p };
        let pb = Problem::new(op, b.clone(), lambda, cfg.problem.q, r)?;
        let errors = gradient_errors(&pb, DIRECTIONS, &mut stream(cfg.seed, 2, k as u64))?;
        let ok = errors.iter().filter(|&&e| e < GRADIENT_TOL).count();
        passed += ok;
        total += errors.len();
        gradient.push(json!({ "p": p, "q": cfg.problem.q, "r": r, "checks": errors.len(), "passed": ok, "worst_error": worst(&errors) }));
    }

    let mut inequalities = Vec::new();
    for (k, &p) in v.exponents.iter().enumerate() {
        let seed = stream(cfg.seed, 3, k as u64).next_u64();
        let report = check_algebraic_inequalities(p, v.inequality_samples, seed);
        passed += report.samples - report.violations.min(report.samples);
        total += report.samples;
        inequalities.push(serde_json::to_value(&report)?);
    }

    let pb = build_problem(cfg)?;
    let seed = stream(cfg.seed, 4, 0).next_u64();
    let reports = accretivity_suite(&pb, v.accretivity_pairs, ACCRETIVITY_DELTA, ACCRETIVITY_TOL, seed)?;
    let contraction = reports.iter().filter(|r| r.contraction_holds).count();
    let ordered = reports.iter().filter(|r| r.order_preserved.is_some()).count();
    let order_ok = reports.iter().filter(|r| r.order_preserved == Some(true)).count();
    let excess = reports
        .iter()
        .map(|r| r.solution_gap - r.data_gap)
        .fold(f64::NEG_INFINITY, f64::max);
    passed += contraction + order_ok;
    total += reports.len() + ordered;

    Ok(json!({
        "homogeneity": homogeneity,
        "gradient": gradient,
        "inequalities": inequalities,
        "accretivity": {
            "pairs": reports.len(),
            "delta": ACCRETIVITY_DELTA,
            "contraction_passed": contraction,
            "ordered_pairs": ordered,
            "order_passed": order_ok,
            "worst_excess": excess,
        },
        "passed": passed,
        "total": total,
        "all_passed": passed == total,
    }))
}
