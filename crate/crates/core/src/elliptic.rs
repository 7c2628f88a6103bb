//! Steady states of `L u = λ u^q - b u^r` in Ω, `u = 0` outside.
//!
//! The energy
//!
//! ```text
//! J(v) = ‖v‖^p / p - λ/(q+1) h^d Σ |v_i|^{q+1} + h^d Σ b_i |v_i|^{r+1} / (r+1)
//! ```
//!
//! has gradient `h^d (Lv - λ Φ_{q+1}(v) + b Φ_{r+1}(v))`. For `q ≤ p-1` it is
//! coercive and the positive solution is its global minimizer over `v ≥ 0`.
//! For `q > p-1` the positive solutions are saddle points; the solver
//! minimizes `v ↦ max_t J(t v)` instead, whose critical points lie on the
//! Nehari manifold.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::eigen::{first_eigen, lm_power, EigenOptions, EigenResult};
use crate::error::{Error, Result};
use crate::grid::{distance_profile, Field, NodeMask};
use crate::nonlocal_op::{phi, NonlocalOperator};
use crate::optim::{self, SpgOptions};

/// Tolerance used to decide `q = p - 1`.
const HOMOGENEOUS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QClass {
    Subhomogeneous,
    Homogeneous,
    Superlinear,
}

pub fn q_class(p: f64, q: f64) -> QClass {
    let d = q - (p - 1.0);
    if d.abs() <= HOMOGENEOUS_EPS {
        QClass::Homogeneous
    } else if d < 0.0 {
        QClass::Subhomogeneous
    } else {
        QClass::Superlinear
    }
}

/// Admissible λ interval; `upper = None` stands for `+∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRange {
    pub q_class: QClass,
    pub lower: f64,
    pub upper: Option<f64>,
}

impl LambdaRange {
    /// Guard band half-width, `1e-3 (λ₁(Ω₀) - λ₁(Ω))` for `q = p - 1`.
    pub fn guard(&self) -> f64 {
        match (self.q_class, self.upper) {
            (QClass::Homogeneous, Some(u)) => 1e-3 * (u - self.lower),
            _ => 0.0,
        }
    }

    pub fn contains(&self, lambda: f64) -> bool {
        lambda > self.lower && self.upper.is_none_or(|u| lambda < u)
    }
}

/// First eigenpairs on Ω and Ω₀, cached per problem family.
#[derive(Clone, Debug)]
pub struct Thresholds {
    pub domain: EigenResult,
    pub refuge: EigenResult,
}

/// Parameters and data of one steady or evolution problem.
#[derive(Clone, Debug)]
pub struct Problem {
    op: Arc<NonlocalOperator>,
    b: Field,
    b_active: Vec<f64>,
    lambda: f64,
    q: f64,
    r: f64,
    refuge_only: bool,
    thresholds: Arc<OnceLock<Thresholds>>,
    refuge_op: Arc<OnceLock<Arc<NonlocalOperator>>>,
}

impl Problem {
    pub fn new(op: Arc<NonlocalOperator>, b: Field, lambda: f64, q: f64, r: f64) -> Result<Self> {
        let p = op.p();
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::param("q", format!("must be positive, got {q}")));
        }
        if !(r > p - 1.0) || !r.is_finite() {
            return Err(Error::param("r", format!("must exceed p - 1 = {}, got {r}", p - 1.0)));
        }
        check_lambda(lambda)?;
        let b_active = op.gather(&b)?;
        if b.values().iter().any(|&x| x < 0.0) {
            return Err(Error::param("b", "must be nonnegative"));
        }
        if b_active.iter().all(|&x| x == 0.0) {
            return Err(Error::param("b", "must not vanish identically"));
        }
        Ok(Problem {
            op,
            b,
            b_active,
            lambda,
            q,
            r,
            refuge_only: false,
            thresholds: Arc::new(OnceLock::new()),
            refuge_op: Arc::new(OnceLock::new()),
        })
    }

    /// The same problem with another λ (eigen thresholds are shared).
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Problem { lambda, ..self.clone() })
    }

    /// Problem posed on the refuge alone with the absorption switched off:
    /// `L₀ v = λ v^q` in Ω₀, `v = 0` outside Ω₀.
    pub fn refuge_only(&self) -> Result<Self> {
        let grid = self.op.grid();
        let op = self.refuge_operator()?;
        let b = Field::zeros(grid);
        Ok(Problem {
            b_active: vec![0.0; op.len()],
            op: Arc::clone(&op),
            b,
            lambda: self.lambda,
            q: self.q,
            r: self.r,
            refuge_only: true,
            thresholds: Arc::new(OnceLock::new()),
            refuge_op: Arc::new(OnceLock::from(Arc::clone(&op))),
        })
    }

    /// The operator restricted to the refuge (pairs and tails as if the
    /// complement of Ω₀ were exterior), assembled once per problem family.
    pub fn refuge_operator(&self) -> Result<Arc<NonlocalOperator>> {
        if let Some(op) = self.refuge_op.get() {
            return Ok(Arc::clone(op));
        }
        let op = if self.refuge_only {
            Arc::clone(&self.op)
        } else {
            Arc::new(self.op.restricted(self.op.grid().refuge_mask())?)
        };
        Ok(Arc::clone(self.refuge_op.get_or_init(|| op)))
    }

    pub fn op(&self) -> &Arc<NonlocalOperator> {
        &self.op
    }

    pub fn absorption(&self) -> &Field {
        &self.b
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn p(&self) -> f64 {
        self.op.p()
    }

    pub fn is_refuge_only(&self) -> bool {
        self.refuge_only
    }

    pub fn q_class(&self) -> QClass {
        q_class(self.p(), self.q)
    }

    /// λ₁(Ω) and λ₁(Ω₀) with eigenfields, computed once per problem family.
    pub fn thresholds(&self) -> Result<&Thresholds> {
        if let Some(t) = self.thresholds.get() {
            return Ok(t);
        }
        let grid = self.op.grid();
        let opts = EigenOptions::default();
        let domain = first_eigen(&self.op, self.op.active_mask(), &opts)?;
        let refuge = first_eigen(&self.op, grid.refuge_mask(), &opts)?;
        Ok(self.thresholds.get_or_init(|| Thresholds { domain, refuge }))
    }

    pub(crate) fn compact(&self) -> Compact<'_> {
        Compact {
            op: &self.op,
            b: &self.b_active,
            lambda: self.lambda,
            q: self.q,
            r: self.r,
        }
    }

    pub fn metadata(&self) -> ProblemMetadata {
        ProblemMetadata {
            lambda: self.lambda,
            q: self.q,
            r: self.r,
            q_class: self.q_class(),
            refuge_only: self.refuge_only,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemMetadata {
    pub lambda: f64,
    pub q: f64,
    pub r: f64,
    pub q_class: QClass,
    pub refuge_only: bool,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
    }
    Ok(())
}

/// Admissible λ range of the problem family.
pub fn lambda_range(pb: &Problem) -> Result<LambdaRange> {
    let class = pb.q_class();
    match class {
        QClass::Subhomogeneous | QClass::Superlinear => Ok(LambdaRange {
            q_class: class,
            lower: 0.0,
            upper: None,
        }),
        QClass::Homogeneous => {
            if pb.refuge_only {
                let t = first_eigen(&pb.op, pb.op.active_mask(), &EigenOptions::default())?;
                return Ok(LambdaRange {
                    q_class: class,
                    lower: t.lambda,
                    upper: Some(t.lambda),
                });
            }
            let t = pb.thresholds()?;
            Ok(LambdaRange {
                q_class: class,
                lower: t.domain.lambda,
                upper: Some(t.refuge.lambda),
            })
        }
    }
}

/// Problem data on active nodes, shared by the solvers.
#[derive(Clone, Copy)]
pub(crate) struct Compact<'a> {
    pub op: &'a NonlocalOperator,
    pub b: &'a [f64],
    pub lambda: f64,
    pub q: f64,
    pub r: f64,
}

/// The three integrals `A = ‖v‖^p`, `B = h^d Σ|v|^{q+1}`, `C = h^d Σ b|v|^{r+1}`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Parts {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Compact<'_> {
    fn p(&self) -> f64 {
        self.op.p()
    }

    pub fn energy(&self, parts: Parts) -> f64 {
        parts.a / self.p() - self.lambda * parts.b / (self.q + 1.0) + parts.c / (self.r + 1.0)
    }

    /// Returns the parts; writes `Lv` into `lv` and, if given, the gradient.
    pub fn evaluate(&self, v: &[f64], lv: &mut [f64], grad: Option<&mut [f64]>) -> Parts {
        let volume = self.op.cell_volume();
        let a = self.op.energy_and_apply(v, lv);
        let mut b = 0.0;
        let mut c = 0.0;
        let mut grad = grad;
        for i in 0..v.len() {
            let src = phi(self.q + 1.0, v[i]);
            let abs = if self.b[i] != 0.0 { phi(self.r + 1.0, v[i]) } else { 0.0 };
            b += src * v[i];
            c += self.b[i] * abs * v[i];
            if let Some(g) = grad.as_deref_mut() {
                g[i] = volume * (lv[i] - self.lambda * src + self.b[i] * abs);
            }
        }
        Parts {
            a,
            b: volume * b,
            c: volume * c,
        }
    }

    /// `‖R‖_∞ / max(‖Lu‖_∞, ‖λΦ_{q+1}(u)‖_∞, ‖bΦ_{r+1}(u)‖_∞)`.
    pub fn relative_residual(&self, v: &[f64], lv: &[f64]) -> f64 {
        let mut res: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..v.len() {
            let src = self.lambda * phi(self.q + 1.0, v[i]);
            let abs = if self.b[i] != 0.0 {
                self.b[i] * phi(self.r + 1.0, v[i])
            } else {
                0.0
            };
            res = res.max((lv[i] - src + abs).abs());
            scale = scale.max(lv[i].abs()).max(src.abs()).max(abs.abs());
        }
        if scale == 0.0 {
            0.0
        } else {
            res / scale
        }
    }

    /// Nodal residual `Lu - λΦ_{q+1}(u) + bΦ_{r+1}(u)`.
    pub fn nodal_residual(&self, v: &[f64]) -> Vec<f64> {
        let mut lv = vec![0.0; v.len()];
        self.op.apply_compact(v, &mut lv);
        (0..v.len())
            .map(|i| {
                let abs = if self.b[i] != 0.0 {
                    self.b[i] * phi(self.r + 1.0, v[i])
                } else {
                    0.0
                };
                lv[i] - self.lambda * phi(self.q + 1.0, v[i]) + abs
            })
            .collect()
    }

    /// Parts of `v` without the operator application cost of a gradient.
    pub fn parts(&self, v: &[f64]) -> Parts {
        let volume = self.op.cell_volume();
        Parts {
            a: self.op.energy_compact(v),
            b: lm_power(v, self.q + 1.0, volume),
            c: volume
                * v.iter()
                    .zip(self.b)
                    .map(|(x, b)| b * x.abs().powf(self.r + 1.0))
                    .sum::<f64>(),
        }
    }
}

/// `J(v)`.
pub fn energy_j(pb: &Problem, v: &Field) -> Result<f64> {
    let c = pb.compact();
    let vc = pb.op.gather(v)?;
    Ok(c.energy(c.parts(&vc)))
}

/// `∇J(v) = h^d (Lv - λΦ_{q+1}(v) + bΦ_{r+1}(v))`.
pub fn grad_j(pb: &Problem, v: &Field) -> Result<Field> {
    let c = pb.compact();
    let vc = pb.op.gather(v)?;
    let mut lv = vec![0.0; vc.len()];
    let mut g = vec![0.0; vc.len()];
    c.evaluate(&vc, &mut lv, Some(&mut g));
    Ok(pb.op.scatter(&g))
}

/// Relative max-norm residual of a candidate steady state.
pub fn steady_residual(pb: &Problem, u: &Field) -> Result<f64> {
    let c = pb.compact();
    let uc = pb.op.gather(u)?;
    let mut lu = vec![0.0; uc.len()];
    pb.op.apply_compact(&uc, &mut lu);
    Ok(c.relative_residual(&uc, &lu))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyStatus {
    Positive,
    NoPositiveSolution,
}

#[derive(Clone, Debug)]
pub struct SteadyState {
    pub field: Field,
    pub residual: f64,
    pub energy_j: f64,
    pub iterations: usize,
    pub status: SteadyStatus,
}

impl SteadyState {
    /// `min` of the field over `mask`.
    pub fn positivity_floor(&self, mask: &NodeMask) -> f64 {
        self.field.min_on(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyOptions {
    /// Relative max-norm residual target.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Norm cap for the superlinear solver.
    pub divergence_cap: f64,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        SteadyOptions {
            tolerance: 1e-10,
            max_iterations: 200_000,
            divergence_cap: 1e8,
        }
    }
}

/// Positive `t` minimizing `J(t v)` for `q ≤ p - 1`, if the ray descends.
fn ray_minimizer(c: &Compact<'_>, parts: Parts) -> Option<f64> {
    let p = c.p();
    // d/dt J(tv) / t^{p-1} = A - λ B t^{q+1-p} + C t^{r+1-p}, increasing in t.
    let h = |t: f64| parts.a - c.lambda * parts.b * t.powf(c.q + 1.0 - p) + parts.c * t.powf(c.r + 1.0 - p);
    let homogeneous = q_class(p, c.q) == QClass::Homogeneous;
    if homogeneous && parts.a >= c.lambda * parts.b {
        return None;
    }
    if parts.c == 0.0 && homogeneous {
        return None;
    }
    bisect_sign_change(h, true)
}

/// Root of a function that changes sign exactly once on `(0, ∞)`.
/// `increasing` tells the direction of the change.
fn bisect_sign_change(h: impl Fn(f64) -> f64, increasing: bool) -> Option<f64> {
    let below = |t: f64| if increasing { h(t) < 0.0 } else { h(t) > 0.0 };
    let mut lo = 1.0;
    let mut hi = 1.0;
    let mut steps = 0;
    while !below(lo) {
        lo *= 0.5;
        steps += 1;
        if steps > 2000 {
            return None;
        }
    }
    steps = 0;
    while below(hi) {
        hi *= 2.0;
        steps += 1;
        if steps > 2000 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

fn diagonal_metric(op: &NonlocalOperator) -> Vec<f64> {
    op.total_weights()
        .iter()
        .map(|t| 1.0 / (2.0 * t * op.cell_volume()))
        .collect()
}

/// Largest active node count for which the dense Newton stage is used.
const NEWTON_MAX_NODES: usize = 1600;

/// Residual at which descent hands over to Newton.
const NEWTON_HANDOVER: f64 = 1e-5;

/// Iteration budget of the descent stage before the first Newton attempt.
const DESCENT_PROBE: usize = 4000;

fn newton_available(c: &Compact<'_>) -> bool {
    c.p() >= 2.0 && c.op.len() <= NEWTON_MAX_NODES
}

/// Damped Newton on the nodal residual from a positive iterate, with a
/// fraction-to-boundary rule keeping iterates positive. Returns the root and
/// its relative residual, or `None` when it stalls above `tol`.
fn newton_polish(c: &Compact<'_>, start: &[f64], tol: f64, max_steps: usize) -> Option<(Vec<f64>, f64, usize)> {
    let n = start.len();
    if start.iter().any(|&x| !(x > 0.0)) {
        return None;
    }
    let rel = |u: &[f64]| {
        let mut lu = vec![0.0; n];
        c.op.apply_compact(u, &mut lu);
        c.relative_residual(u, &lu)
    };
    let norm2 = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut u = start.to_vec();
    let mut res = c.nodal_residual(&u);
    let mut merit = norm2(&res);
    for step in 0..max_steps {
        let current = rel(&u);
        if current <= tol {
            return Some((u, current, step));
        }
        let mut jac = c.op.jacobian_dense(&u);
        for i in 0..n {
            let mut d = -c.lambda * c.q * u[i].powf(c.q - 1.0);
            if c.b[i] != 0.0 {
                d += c.b[i] * c.r * u[i].powf(c.r - 1.0);
            }
            jac[i * n + i] += d;
        }
        let matrix = nalgebra::DMatrix::from_row_slice(n, n, &jac);
        let rhs = nalgebra::DVector::from_iterator(n, res.iter().map(|r| -r));
        let delta = matrix.lu().solve(&rhs)?;
        let mut tau: f64 = 1.0;
        for i in 0..n {
            if delta[i] < 0.0 {
                tau = tau.min(0.95 * u[i] / -delta[i]);
            }
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..n).map(|i| u[i] + tau * delta[i]).collect();
            let trial_res = c.nodal_residual(&trial);
            let trial_merit = norm2(&trial_res);
            if trial_merit <= (1.0 - 1e-4 * tau) * merit {
                u = trial;
                res = trial_res;
                merit = trial_merit;
                accepted = true;
                break;
            }
            tau *= 0.5;
        }
        if !accepted {
            let current = rel(&u);
            return (current <= tol).then_some((u, current, step));
        }
    }
    let current = rel(&u);
    (current <= tol).then_some((u, current, max_steps))
}

/// Follows the positive branch from `(from, start)` to `c.lambda` by Newton
/// continuation with a secant predictor and adaptive steps.
fn newton_continuation(c: &Compact<'_>, from: f64, start: Vec<f64>, tol: f64) -> Option<(Vec<f64>, f64, usize)> {
    let target = c.lambda;
    let span = target - from;
    let mut lambda = from;
    let mut u = start;
    let mut previous: Option<(f64, Vec<f64>)> = None;
    let mut step = span / 8.0;
    let mut total = 0;
    while lambda != target {
        if step.abs() < 1e-12 * span.abs() {
            return None;
        }
        let next = if (target - lambda).abs() <= step.abs() {
            target
        } else {
            lambda + step
        };
        let guess: Vec<f64> = match &previous {
            Some((lp, up)) => {
                let ratio = (next - lambda) / (lambda - lp);
                u.iter()
                    .zip(up)
                    .map(|(&a, &b)| (a + ratio * (a - b)).max(0.5 * a))
                    .collect()
            }
            None => u.clone(),
        };
        let stage = Compact { lambda: next, ..*c };
        let stage_tol = if next == target { tol } else { tol.max(1e-8) };
        match newton_polish(&stage, &guess, stage_tol, 30) {
            Some((root, _, steps)) => {
                total += steps;
                previous = Some((lambda, std::mem::replace(&mut u, root)));
                lambda = next;
                step *= 1.5;
            }
            None => step *= 0.5,
        }
    }
    let mut lu = vec![0.0; u.len()];
    c.op.apply_compact(&u, &mut lu);
    let res = c.relative_residual(&u, &lu);
    Some((u, res, total))
}

/// Unique positive solution for `q ≤ p - 1` by energy descent.
///
/// Outside the admissible range the zero field is returned with status
/// [`SteadyStatus::NoPositiveSolution`]; inside the guard band around the
/// range endpoints a [`Error::GuardBand`] is raised.
pub fn solve_subhomogeneous(pb: &Problem, init: Option<&Field>, opts: &SteadyOptions) -> Result<SteadyState> {
    let class = pb.q_class();
    if class == QClass::Superlinear {
        return Err(Error::param("q", "solve_subhomogeneous needs q <= p - 1"));
    }
    let c = pb.compact();
    let n = pb.op.len();
    let zero_state = || SteadyState {
        field: Field::zeros(pb.op.grid()),
        residual: 0.0,
        energy_j: 0.0,
        iterations: 0,
        status: SteadyStatus::NoPositiveSolution,
    };

    let mut direction: Option<Vec<f64>> = init.map(|f| pb.op.gather(f)).transpose()?;
    if class == QClass::Homogeneous {
        if pb.refuge_only {
            return Err(Error::param(
                "q",
                "q = p - 1 needs absorption; refuge-only mode is unsupported",
            ));
        }
        let range = lambda_range(pb)?;
        let upper = range.upper.expect("finite upper endpoint");
        let guard = range.guard();
        let lambda = pb.lambda;
        let near = |end: f64| (lambda - end).abs() < guard;
        if near(range.lower) || near(upper) {
            return Err(Error::GuardBand {
                lambda,
                lower: range.lower,
                upper,
            });
        }
        if !range.contains(lambda) {
            return Ok(zero_state());
        }
        if direction.is_none() {
            direction = Some(pb.op.gather(&pb.thresholds()?.domain.eigenfield)?);
        }
    }
    let direction = match direction {
        Some(d) => d,
        None => pb
            .op
            .gather(&distance_profile(pb.op.grid(), pb.op.active_mask(), pb.op.params().s)?)?,
    };
    if direction.iter().any(|&x| x < 0.0) || direction.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidField(
            "initial field must be nonnegative and nonzero".into(),
        ));
    }
    // Start from the best multiple of the initial direction (keeps warm
    // starts as they are when they already sit near the minimizer).
    let start = match ray_minimizer(&c, c.parts(&direction)) {
        Some(t) if init.is_none() || (t - 1.0).abs() > 0.5 => direction.iter().map(|x| t * x).collect(),
        _ => direction,
    };

    let mut lv = vec![0.0; n];
    let mut objective = |v: &[f64], g: &mut [f64]| -> f64 {
        let parts = c.evaluate(v, &mut lv, Some(g));
        c.energy(parts)
    };
    let volume = pb.op.cell_volume();
    let residual = |v: &[f64], _f: f64, g: &[f64]| -> f64 {
        // g = h^d R, so the relative residual needs the individual terms.
        let mut res: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..v.len() {
            let src = c.lambda * phi(c.q + 1.0, v[i]);
            let abs = if c.b[i] != 0.0 {
                c.b[i] * phi(c.r + 1.0, v[i])
            } else {
                0.0
            };
            let r = g[i] / volume;
            res = res.max(r.abs());
            scale = scale.max((r + src - abs).abs()).max(src.abs()).max(abs.abs());
        }
        if scale == 0.0 {
            f64::INFINITY
        } else {
            res / scale
        }
    };
    let spg = SpgOptions {
        max_iterations: opts.max_iterations,
        tolerance: opts.tolerance,
        nonnegative: true,
        scaling: Some(diagonal_metric(&pb.op)),
        ..Default::default()
    };
    let mut x = start;
    let mut iterations = 0;
    let mut res = f64::INFINITY;
    let mut converged = false;
    if newton_available(&c) {
        let probe = SpgOptions {
            max_iterations: DESCENT_PROBE.min(opts.max_iterations),
            tolerance: opts.tolerance.max(NEWTON_HANDOVER),
            ..spg.clone()
        };
        let (y, it, r, _) = restarted(&mut objective, x, &probe, residual);
        iterations += it;
        res = r;
        x = y;
        if let Some((root, r, steps)) = newton_polish(&c, &x, opts.tolerance, 60) {
            x = root;
            res = r;
            iterations += steps;
            converged = true;
        }
        if !converged && class == QClass::Homogeneous {
            // Near the range ends the energy is flat; follow the branch
            // from the middle of the range instead.
            let range = lambda_range(pb)?;
            let mid = 0.5 * (range.lower + range.upper.expect("finite upper endpoint"));
            if (pb.lambda - mid).abs() > 1e-9 * mid {
                let anchor = solve_subhomogeneous(&pb.with_lambda(mid)?, None, opts)?;
                let anchor = pb.op.gather(&anchor.field)?;
                if let Some((root, r, steps)) = newton_continuation(&c, mid, anchor, opts.tolerance) {
                    x = root;
                    res = r;
                    iterations += steps;
                    converged = true;
                }
            }
        }
    }
    if !converged {
        let rest = SpgOptions {
            max_iterations: opts.max_iterations.saturating_sub(iterations),
            ..spg.clone()
        };
        let (y, it, r, ok) = restarted(&mut objective, x, &rest, residual);
        iterations += it;
        x = y;
        res = r;
        converged = ok;
    }
    if !converged {
        return Err(Error::NonConvergence {
            stage: "steady",
            iterations,
            residual: res,
            last_iterate: pb.op.scatter(&x).into_values(),
        });
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::NonConvergence {
            stage: "steady (collapsed to the trivial solution)",
            iterations,
            residual: res,
            last_iterate: vec![0.0; pb.op.grid().node_count()],
        });
    }
    let parts = c.parts(&x);
    Ok(SteadyState {
        field: pb.op.scatter(&x),
        residual: res,
        energy_j: c.energy(parts),
        iterations,
        status: SteadyStatus::Positive,
    })
}

/// Runs SPG, restarting after line-search stalls while progress continues.
fn restarted<F, R>(objective: &mut F, start: Vec<f64>, spg: &SpgOptions, residual: R) -> (Vec<f64>, usize, f64, bool)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Fn(&[f64], f64, &[f64]) -> f64 + Copy,
{
    let mut x = start;
    let mut iterations = 0;
    loop {
        let run = SpgOptions {
            max_iterations: spg.max_iterations.saturating_sub(iterations),
            ..spg.clone()
        };
        let out = optim::minimize(&mut *objective, x, &run, residual);
        iterations += out.iterations;
        if out.converged || out.iterations == 0 || iterations >= spg.max_iterations {
            return (out.x, iterations, out.residual, out.converged);
        }
        x = out.x;
    }
}

/// Largest `t` with `d/dt J(t v) = 0` (the ray maximizer) for `q > p - 1`, `r < q`.
fn ray_maximizer(c: &Compact<'_>, parts: Parts) -> Option<f64> {
    let p = c.p();
    // A + C t^{r+1-p} - λ B t^{q+1-p} rises then falls; one positive root.
    let h = |t: f64| parts.a + parts.c * t.powf(c.r + 1.0 - p) - c.lambda * parts.b * t.powf(c.q + 1.0 - p);
    if parts.b == 0.0 {
        return None;
    }
    bisect_sign_change(h, false)
}

/// Critical point for `p - 1 < q` (and `r < q`) by minimizing
/// `Ĵ(v) = max_t J(t v)` over nonnegative directions. Convergence is
/// certified by the residual only; the mountain-pass level is not identified.
pub fn solve_superlinear(pb: &Problem, init: &Field, opts: &SteadyOptions) -> Result<SteadyState> {
    let p = pb.p();
    if pb.q_class() != QClass::Superlinear {
        return Err(Error::param("q", "solve_superlinear needs q > p - 1"));
    }
    if !(pb.r < pb.q) {
        return Err(Error::param(
            "r",
            format!("must be below q = {} in the superlinear regime", pb.q),
        ));
    }
    let params = pb.op.params();
    let d = pb.op.grid().dimension() as f64;
    if params.sp() < d {
        let critical = d * p / (d - params.sp());
        if pb.q >= critical - 1.0 {
            return Err(Error::param(
                "q",
                format!("must be below the critical exponent {}", critical - 1.0),
            ));
        }
    }
    let c = pb.compact();
    let n = pb.op.len();
    let start = pb.op.gather(init)?;
    if start.iter().any(|&x| x < 0.0) || start.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidField(
            "initial field must be nonnegative and nonzero".into(),
        ));
    }
    let vmax0 = start.iter().fold(0.0f64, |m, x| m.max(*x));
    let direction: Vec<f64> = start.iter().map(|x| x / vmax0).collect();

    let cap = opts.divergence_cap;
    let mut lv = vec![0.0; n];
    let mut scaled = vec![0.0; n];
    let diverged: std::cell::Cell<Option<f64>> = std::cell::Cell::new(None);
    let mut objective = |v: &[f64], g: &mut [f64]| -> f64 {
        let Some(t) = ray_maximizer(&c, c.parts(v)) else {
            return f64::INFINITY;
        };
        for i in 0..n {
            scaled[i] = t * v[i];
        }
        let vmax = v.iter().fold(0.0f64, |m, x| m.max(*x));
        if t * vmax > cap {
            diverged.set(Some(t * vmax));
            return f64::INFINITY;
        }
        let parts = c.evaluate(&scaled, &mut lv, Some(g));
        for gi in g.iter_mut() {
            *gi *= t;
        }
        c.energy(parts)
    };
    let volume = pb.op.cell_volume();
    let residual = |v: &[f64], _f: f64, g: &[f64]| -> f64 {
        let Some(t) = ray_maximizer(&c, c.parts(v)) else {
            return f64::INFINITY;
        };
        let mut res: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..v.len() {
            let u = t * v[i];
            let src = c.lambda * phi(c.q + 1.0, u);
            let abs = if c.b[i] != 0.0 { c.b[i] * phi(c.r + 1.0, u) } else { 0.0 };
            let r = g[i] / (t * volume);
            res = res.max(r.abs());
            scale = scale.max((r + src - abs).abs()).max(src.abs()).max(abs.abs());
        }
        res / scale
    };
    let spg = SpgOptions {
        max_iterations: opts.max_iterations,
        tolerance: opts.tolerance,
        nonnegative: true,
        scaling: Some(diagonal_metric(&pb.op)),
        ..Default::default()
    };
    let newton = newton_available(&c);
    let first = SpgOptions {
        max_iterations: if newton {
            DESCENT_PROBE.min(opts.max_iterations)
        } else {
            opts.max_iterations
        },
        tolerance: if newton {
            opts.tolerance.max(NEWTON_HANDOVER)
        } else {
            opts.tolerance
        },
        ..spg.clone()
    };
    let (mut x, mut iterations, mut res, mut converged) = restarted(&mut objective, direction, &first, residual);
    let mut polished: Option<Vec<f64>> = None;
    if newton && diverged.get().is_none() {
        if let Some(t) = ray_maximizer(&c, c.parts(&x)) {
            let u: Vec<f64> = x.iter().map(|v| t * v).collect();
            if let Some((root, r, steps)) = newton_polish(&c, &u, opts.tolerance, 60) {
                let top = root.iter().fold(0.0f64, |m, x| m.max(*x));
                if top <= cap {
                    polished = Some(root);
                    res = r;
                    iterations += steps;
                    converged = true;
                }
            }
        }
        if polished.is_none() && !converged {
            let rest = SpgOptions {
                max_iterations: opts.max_iterations.saturating_sub(iterations),
                ..spg.clone()
            };
            let (y, it, r, ok) = restarted(&mut objective, x, &rest, residual);
            x = y;
            iterations += it;
            res = r;
            converged = ok;
        }
    }
    if let Some(norm) = diverged.get().filter(|_| !converged) {
        return Err(Error::Divergence { norm, cap });
    }
    let u: Vec<f64> = match polished {
        Some(u) => u,
        None => {
            let t = ray_maximizer(&c, c.parts(&x)).ok_or_else(|| Error::NonConvergence {
                stage: "superlinear",
                iterations,
                residual: f64::INFINITY,
                last_iterate: pb.op.scatter(&x).into_values(),
            })?;
            x.iter().map(|v| t * v).collect()
        }
    };
    if !converged {
        return Err(Error::NonConvergence {
            stage: "superlinear",
            iterations,
            residual: res,
            last_iterate: pb.op.scatter(&u).into_values(),
        });
    }
    let parts = c.parts(&u);
    Ok(SteadyState {
        field: pb.op.scatter(&u),
        residual: res,
        energy_j: c.energy(parts),
        iterations,
        status: SteadyStatus::Positive,
    })
}

/// Dispatches on the exponent class.
pub fn solve_steady(pb: &Problem, init: Option<&Field>, opts: &SteadyOptions) -> Result<SteadyState> {
    match pb.q_class() {
        QClass::Superlinear => {
            let fallback;
            let init = match init {
                Some(f) => f,
                None => {
                    fallback = pb.thresholds()?.refuge.eigenfield.clone();
                    &fallback
                }
            };
            solve_superlinear(pb, init, opts)
        }
        _ => solve_subhomogeneous(pb, init, opts),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Worst negative part of `R(u)`, relative to the residual scale.
    pub super_defect: f64,
    /// Worst positive part of `R(v)`, relative to the residual scale.
    pub sub_defect: f64,
    pub is_supersolution: bool,
    pub is_subsolution: bool,
    /// Nodes with `u < v - tol` (checked only when both hypotheses hold).
    pub violations: Vec<usize>,
    pub max_violation: f64,
    pub holds: bool,
}

/// Checks the comparison principle for the pair `(u, v)`: if `u` is a
/// supersolution and `v` a subsolution (tested against every nodal test
/// field, with relative tolerance `tol`), then `u ≥ v - tol` nodewise.
pub fn check_comparison(u: &Field, v: &Field, pb: &Problem, tol: f64) -> Result<ComparisonReport> {
    let c = pb.compact();
    let uc = pb.op.gather(u)?;
    let vc = pb.op.gather(v)?;
    if uc.iter().chain(&vc).any(|&x| x < 0.0) {
        return Err(Error::InvalidField("comparison needs nonnegative fields".into()));
    }
    let scale_of = |w: &[f64]| {
        let mut lw = vec![0.0; w.len()];
        pb.op.apply_compact(w, &mut lw);
        let mut s: f64 = 0.0;
        for i in 0..w.len() {
            s = s
                .max(lw[i].abs())
                .max((c.lambda * phi(c.q + 1.0, w[i])).abs())
                .max((c.b[i] * phi(c.r + 1.0, w[i])).abs());
        }
        if s == 0.0 {
            1.0
        } else {
            s
        }
    };
    let ru = c.nodal_residual(&uc);
    let rv = c.nodal_residual(&vc);
    let su = scale_of(&uc);
    let sv = scale_of(&vc);
    let super_defect = ru.iter().fold(0.0f64, |m, &r| m.max(-r)) / su;
    let sub_defect = rv.iter().fold(0.0f64, |m, &r| m.max(r)) / sv;
    let is_supersolution = super_defect <= tol;
    let is_subsolution = sub_defect <= tol;
    let mut violations = Vec::new();
    let mut max_violation: f64 = 0.0;
    let umax = uc.iter().chain(&vc).fold(0.0f64, |m, x| m.max(*x)).max(1.0);
    for (k, (&a, &b)) in uc.iter().zip(&vc).enumerate() {
        let gap = b - a;
        if gap > tol * umax {
            violations.push(pb.op.active_nodes()[k]);
        }
        max_violation = max_violation.max(gap);
    }
    let holds = !(is_supersolution && is_subsolution) || violations.is_empty();
    Ok(ComparisonReport {
        super_defect,
        sub_defect,
        is_supersolution,
        is_subsolution,
        violations,
        max_violation,
        holds,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub residual: f64,
    pub linf: f64,
    pub l2: f64,
    pub energy_j: f64,
    pub mins: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `(lambda, error message)` for points that failed.
    pub failures: Vec<(f64, String)>,
}

impl SweepTable {
    /// CSV with columns `lambda,residual,linf,l2,J,min_K1,...`; failed
    /// points appear with `NaN` entries.
    pub fn to_csv(&self, lambdas: &[f64], masks: usize) -> String {
        let mut out = String::from("lambda,residual,linf,l2,J");
        for k in 1..=masks {
            out.push_str(&format!(",min_K{k}"));
        }
        out.push('\n');
        for &lambda in lambdas {
            let row = self.rows.iter().find(|r| r.lambda == lambda);
            let mut cells = vec![crate::io::fmt_float(lambda)];
            match row {
                Some(r) => {
                    cells.extend(
                        [r.residual, r.linf, r.l2, r.energy_j]
                            .iter()
                            .map(|&x| crate::io::fmt_float(x)),
                    );
                    cells.extend(r.mins.iter().map(|&x| crate::io::fmt_float(x)));
                }
                None => cells.extend(std::iter::repeat_n("NaN".to_string(), 4 + masks)),
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Solves the steady problem along `lambdas` (in the given order), warm
/// starting each point from the previous solution.
pub fn lambda_sweep(
    template: &Problem,
    lambdas: &[f64],
    compact_masks: &[NodeMask],
    opts: &SteadyOptions,
) -> Result<SweepTable> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut previous: Option<Field> = None;
    let interior = template.op.active_mask().clone();
    for &lambda in lambdas {
        let pb = template.with_lambda(lambda)?;
        let warm = previous.as_ref().filter(|f| f.linf() > 0.0);
        match solve_steady(&pb, warm, opts) {
            Ok(state) if state.status == SteadyStatus::Positive => {
                rows.push(SweepRow {
                    lambda,
                    residual: state.residual,
                    linf: state.field.linf(),
                    l2: state.field.lm_norm_on(2.0, &interior),
                    energy_j: state.energy_j,
                    mins: compact_masks.iter().map(|m| state.field.min_on(m)).collect(),
                    iterations: state.iterations,
                });
                previous = Some(state.field);
            }
            Ok(_) => failures.push((lambda, "no positive solution".to_string())),
            Err(e) => failures.push((lambda, e.to_string())),
        }
    }
    Ok(SweepTable { rows, failures })
}
