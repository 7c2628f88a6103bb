//! First eigenpairs by minimization of the Rayleigh quotient
//!
//! ```text
//! Q(v) = (‖v‖^p + μ h^d Σ b_i |v_i|^p) / (h^d Σ |v_i|^p)
//! ```
//!
//! over nonnegative fields. The quotient is 0-homogeneous, so no explicit
//! sphere constraint is needed during the descent; the minimizer is
//! normalized to unit discrete `L^p` norm at the end.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{distance_profile, Field, NodeMask};
use crate::nonlocal_op::{phi, NonlocalOperator};
use crate::optim::{self, SpgOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenOptions {
    /// Stop when `‖Lψ - λΦ_p(ψ)‖_∞ ≤ tolerance · λ · ‖ψ‖_∞^{p-1}`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Use the operator's row sums as a diagonal metric.
    pub diagonal_scaling: bool,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tolerance: 1e-8,
            max_iterations: 50_000,
            diagonal_scaling: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigenResult {
    pub lambda: f64,
    /// Nonnegative, unit discrete `L^p` norm.
    pub eigenfield: Field,
    pub iterations: usize,
    /// Relative Euler–Lagrange residual (see [`EigenOptions::tolerance`]).
    pub residual: f64,
    pub mu: Option<f64>,
}

/// Operator posed on `mask`, borrowing when the mask is the operator's own.
pub(crate) fn on_domain<'a>(op: &'a NonlocalOperator, mask: &NodeMask) -> Result<Cow<'a, NonlocalOperator>> {
    if mask.len() != op.grid().node_count() {
        return Err(Error::LengthMismatch {
            expected: op.grid().node_count(),
            actual: mask.len(),
        });
    }
    let mask = mask.and(op.active_mask());
    if mask.count() == 0 {
        return Err(Error::param("domain_mask", "contains no interior node"));
    }
    if mask == *op.active_mask() {
        Ok(Cow::Borrowed(op))
    } else {
        Ok(Cow::Owned(op.restricted(&mask)?))
    }
}

/// Discrete `‖v‖_{L^m}^m = h^d Σ |v_i|^m` of a compact vector.
pub(crate) fn lm_power(v: &[f64], m: f64, volume: f64) -> f64 {
    volume * v.iter().map(|x| x.abs().powf(m)).sum::<f64>()
}

/// Rayleigh quotient `‖v‖^p / ‖v‖_{L^p}^p` of a nonzero field.
pub fn rayleigh_quotient(op: &NonlocalOperator, v: &Field) -> Result<f64> {
    let compact = op.gather(v)?;
    let denom = lm_power(&compact, op.p(), op.cell_volume());
    if denom == 0.0 {
        return Err(Error::InvalidField("quotient of the zero field".into()));
    }
    Ok(op.energy_compact(&compact) / denom)
}

/// λ₁ of the operator restricted to `domain_mask`.
pub fn first_eigen(op: &NonlocalOperator, domain_mask: &NodeMask, opts: &EigenOptions) -> Result<EigenResult> {
    let sub = on_domain(op, domain_mask)?;
    let init = distance_profile(op.grid(), sub.active_mask(), sub.params().s)?;
    let init = sub.gather(&init)?;
    solve_quotient(&sub, None, init, opts, None)
}

/// Weighted eigenpair `(λ_μ, ψ_μ)` on the full interior.
pub fn weighted_eigen(op: &NonlocalOperator, b: &Field, mu: f64, opts: &EigenOptions) -> Result<EigenResult> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::param("mu", format!("must be nonnegative, got {mu}")));
    }
    let weight: Vec<f64> = op.gather(b)?.into_iter().map(|x| mu * x).collect();
    if weight.iter().any(|&w| w < 0.0) {
        return Err(Error::param("b", "must be nonnegative"));
    }
    let init = distance_profile(op.grid(), op.active_mask(), op.params().s)?;
    let init = op.gather(&init)?;
    solve_quotient(op, Some(&weight), init, opts, Some(mu))
}

/// Minimizes the (weighted) quotient from `init` on `op`'s active nodes.
pub(crate) fn solve_quotient(
    op: &NonlocalOperator,
    weight: Option<&[f64]>,
    init: Vec<f64>,
    opts: &EigenOptions,
    mu: Option<f64>,
) -> Result<EigenResult> {
    let n = op.len();
    let p = op.p();
    let volume = op.cell_volume();
    if init.len() != n || init.iter().all(|&x| x <= 0.0) {
        return Err(Error::InvalidField("initial field must be positive somewhere".into()));
    }
    let mut lv = vec![0.0; n];
    let mut objective = |v: &[f64], grad: &mut [f64]| -> f64 {
        let a = op.energy_and_apply(v, &mut lv);
        let mut b = 0.0;
        let mut w = 0.0;
        for i in 0..n {
            let pw = v[i].abs().powf(p);
            b += pw;
            if let Some(wt) = weight {
                w += wt[i] * pw;
            }
        }
        let b = volume * b;
        if b == 0.0 {
            return f64::INFINITY;
        }
        let q = (a + volume * w) / b;
        let scale = p * volume / b;
        for i in 0..n {
            let ph = phi(p, v[i]);
            let extra = weight.map_or(0.0, |wt| wt[i] * ph);
            grad[i] = scale * (lv[i] + extra - q * ph);
        }
        q
    };
    // The gradient is the Euler–Lagrange residual times p h^d / B.
    let residual = |v: &[f64], q: f64, grad: &[f64]| -> f64 {
        let b = lm_power(v, p, volume);
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let gmax = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        gmax * b / (p * volume) / (q * vmax.powf(p - 1.0))
    };
    let scaling = opts.diagonal_scaling.then(|| {
        op.total_weights()
            .iter()
            .enumerate()
            .map(|(i, &t)| 1.0 / (2.0 * t + weight.map_or(0.0, |w| w[i])))
            .collect::<Vec<f64>>()
    });
    let spg = SpgOptions {
        max_iterations: opts.max_iterations,
        tolerance: opts.tolerance,
        nonnegative: true,
        scaling,
        ..Default::default()
    };

    let mut x = init;
    let mut iterations = 0;
    let mut outcome;
    // Restart after a line-search stall; each restart resets the BB memory.
    loop {
        let remaining = opts.max_iterations.saturating_sub(iterations);
        let run = SpgOptions {
            max_iterations: remaining,
            ..spg.clone()
        };
        outcome = optim::minimize(&mut objective, x, &run, residual);
        iterations += outcome.iterations;
        if outcome.converged || iterations >= opts.max_iterations || outcome.iterations == 0 {
            break;
        }
        x = outcome.x.clone();
    }
    let norm = lm_power(&outcome.x, p, volume).powf(1.0 / p);
    let v: Vec<f64> = outcome.x.iter().map(|x| x / norm).collect();
    if !outcome.converged {
        return Err(Error::NonConvergence {
            stage: "eigen",
            iterations,
            residual: outcome.residual,
            last_iterate: op.scatter(&v).into_values(),
        });
    }
    let mut lv = vec![0.0; n];
    let a = op.energy_and_apply(&v, &mut lv);
    let w = weight.map_or(0.0, |wt| lm_weighted(&v, wt, p, volume));
    let lambda = (a + w) / lm_power(&v, p, volume);
    Ok(EigenResult {
        lambda,
        eigenfield: op.scatter(&v),
        iterations,
        residual: outcome.residual,
        mu,
    })
}

fn lm_weighted(v: &[f64], weight: &[f64], p: f64, volume: f64) -> f64 {
    volume * v.iter().zip(weight).map(|(x, w)| w * x.abs().powf(p)).sum::<f64>()
}

/// `‖Lψ + μbΦ_p(ψ) - λΦ_p(ψ)‖_∞ / (λ ‖ψ‖_∞^{p-1})` recomputed from scratch.
pub fn eigen_residual(op: &NonlocalOperator, result: &EigenResult, b: Option<&Field>) -> Result<f64> {
    let sub = on_domain(op, &support_mask(&result.eigenfield, op))?;
    let v = sub.gather(&result.eigenfield)?;
    let p = op.p();
    let mut lv = vec![0.0; v.len()];
    sub.apply_compact(&v, &mut lv);
    let weight = match (b, result.mu) {
        (Some(b), Some(mu)) => sub.gather(b)?.into_iter().map(|x| mu * x).collect(),
        _ => vec![0.0; v.len()],
    };
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let r = (0..v.len())
        .map(|i| (lv[i] + (weight[i] - result.lambda) * phi(p, v[i])).abs())
        .fold(0.0, f64::max);
    Ok(r / (result.lambda * vmax.powf(p - 1.0)))
}

fn support_mask(v: &Field, op: &NonlocalOperator) -> NodeMask {
    NodeMask::new(
        v.values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x != 0.0 && op.active_mask().get(i))
            .collect(),
    )
}
