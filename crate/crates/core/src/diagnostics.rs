//! Potential-well quantities and run classification.
//!
//! On a sub-domain `𝒪` (a node mask, everything else treated as exterior):
//!
//! ```text
//! E_𝒪(v) = ‖v‖^p / p - λ ‖v‖_{q+1}^{q+1} / (q+1)
//! I_𝒪(v) = ‖v‖^p - λ ‖v‖_{q+1}^{q+1}
//! θ*(v)  = (‖v‖^p / (λ ‖v‖_{q+1}^{q+1}))^{1/(q+1-p)}
//! S₀     = inf ‖v‖^p / ‖v‖_{q+1}^p
//! m      = (1/p - 1/(q+1)) λ^{-p/(q+1-p)} S₀^{(q+1)/(q+1-p)}
//! ```

use serde::{Deserialize, Serialize};

use crate::eigen::{first_eigen, lm_power, on_domain, EigenOptions};
use crate::elliptic::{q_class, Problem, QClass};
use crate::error::{Error, Result};
use crate::grid::{distance_profile, Field, NodeMask};
use crate::nonlocal_op::{phi, NonlocalOperator};
use crate::optim::{self, SpgOptions};
use crate::parabolic::{Classification, SeriesRow, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellEnergies {
    pub energy: f64,
    pub nehari: f64,
}

/// `E` and `I` of a compact vector on `op`'s active nodes.
pub(crate) fn well_energies_compact(op: &NonlocalOperator, v: &[f64], lambda: f64, q: f64) -> WellEnergies {
    let a = op.energy_compact(v);
    let b = lm_power(v, q + 1.0, op.cell_volume());
    WellEnergies {
        energy: a / op.p() - lambda * b / (q + 1.0),
        nehari: a - lambda * b,
    }
}

fn restricted_compact(sub: &NonlocalOperator, v: &Field) -> Result<Vec<f64>> {
    if !std::sync::Arc::ptr_eq(v.grid(), sub.grid()) && **v.grid() != **sub.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(v.gather(sub.active_nodes()))
}

/// `E_𝒪(v)` and `I_𝒪(v)` for `𝒪 = mask`; values of `v` off the mask are ignored.
pub fn well_energies(op: &NonlocalOperator, mask: &NodeMask, lambda: f64, q: f64, v: &Field) -> Result<WellEnergies> {
    let sub = on_domain(op, mask)?;
    let vc = restricted_compact(&sub, v)?;
    Ok(well_energies_compact(&sub, &vc, lambda, q))
}

fn theta_from_parts(a: f64, b: f64, lambda: f64, p: f64, q: f64) -> f64 {
    (a / (lambda * b)).powf(1.0 / (q + 1.0 - p))
}

fn check_superlinear(p: f64, q: f64) -> Result<()> {
    if q_class(p, q) != QClass::Superlinear {
        return Err(Error::param("q", format!("must exceed p - 1 = {}", p - 1.0)));
    }
    Ok(())
}

/// Nehari scaling `θ*` with `I_𝒪(θ* v) = 0`.
pub fn theta_star(op: &NonlocalOperator, mask: &NodeMask, lambda: f64, q: f64, v: &Field) -> Result<f64> {
    check_superlinear(op.p(), q)?;
    let sub = on_domain(op, mask)?;
    let vc = restricted_compact(&sub, v)?;
    let b = lm_power(&vc, q + 1.0, sub.cell_volume());
    if b == 0.0 {
        return Err(Error::InvalidField("θ* of the zero field".into()));
    }
    Ok(theta_from_parts(sub.energy_compact(&vc), b, lambda, op.p(), q))
}

/// `sup_θ E_𝒪(θ v) = E_𝒪(θ* v)` in closed form.
pub fn ray_maximum(op: &NonlocalOperator, mask: &NodeMask, lambda: f64, q: f64, v: &Field) -> Result<f64> {
    let t = theta_star(op, mask, lambda, q, v)?;
    Ok(well_energies(op, mask, lambda, q, &v.scaled(t))?.energy)
}

/// `m` from `S₀`.
pub fn mountain_from_s0(p: f64, q: f64, lambda: f64, s0: f64) -> f64 {
    let k = q + 1.0 - p;
    (1.0 / p - 1.0 / (q + 1.0)) * lambda.powf(-p / k) * s0.powf((q + 1.0) / k)
}

#[derive(Clone, Debug)]
pub struct MountainLevel {
    pub m: f64,
    pub s0: f64,
    /// Minimizer of the quotient, normalized to unit max norm.
    pub minimizer: Field,
    pub iterations: usize,
    pub residual: f64,
}

/// `S₀` by minimizing `‖v‖^p / ‖v‖_{q+1}^p` over nonnegative fields on
/// `mask`, and `m` from the closed formula.
pub fn mountain_level(
    op: &NonlocalOperator,
    mask: &NodeMask,
    lambda: f64,
    q: f64,
    opts: &EigenOptions,
) -> Result<MountainLevel> {
    let p = op.p();
    if !(lambda > 0.0) {
        return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
    }
    if !(q > p - 1.0) {
        return Err(Error::param("q", format!("must exceed p - 1 = {}", p - 1.0)));
    }
    let sub = on_domain(op, mask)?;
    let n = sub.len();
    let volume = sub.cell_volume();
    let m = q + 1.0;
    let init = sub.gather(&distance_profile(op.grid(), sub.active_mask(), sub.params().s)?)?;
    let mut lv = vec![0.0; n];
    let mut objective = |v: &[f64], grad: &mut [f64]| -> f64 {
        let a = sub.energy_and_apply(v, &mut lv);
        let norm = lm_power(v, m, volume);
        if norm == 0.0 {
            return f64::INFINITY;
        }
        let denom = norm.powf(p / m);
        let ratio = a / norm;
        let scale = p * volume / denom;
        for i in 0..n {
            grad[i] = scale * (lv[i] - ratio * phi(m, v[i]));
        }
        a / denom
    };
    let residual = |v: &[f64], _f: f64, grad: &[f64]| -> f64 {
        let norm = lm_power(v, m, volume);
        let vmax = v.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        let gmax = grad.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        let a = sub.energy_compact(v);
        // grad = p h^d (Lv - (A/N) Φ_m(v)) / N^{p/m}.
        let nodal = gmax * norm.powf(p / m) / (p * volume);
        nodal / ((a / norm) * vmax.powf(m - 1.0))
    };
    let scaling = opts.diagonal_scaling.then(|| {
        sub.total_weights()
            .iter()
            .map(|t| 1.0 / (2.0 * t))
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
    let outcome = loop {
        let run = SpgOptions {
            max_iterations: opts.max_iterations.saturating_sub(iterations),
            ..spg.clone()
        };
        let out = optim::minimize(&mut objective, x, &run, residual);
        iterations += out.iterations;
        if out.converged || out.iterations == 0 || iterations >= opts.max_iterations {
            break out;
        }
        x = out.x;
    };
    if !outcome.converged {
        return Err(Error::NonConvergence {
            stage: "mountain level",
            iterations,
            residual: outcome.residual,
            last_iterate: sub.scatter(&outcome.x).into_values(),
        });
    }
    let v = outcome.x;
    let s0 = sub.energy_compact(&v) / lm_power(&v, m, volume).powf(p / m);
    let vmax = v.iter().fold(0.0f64, |s, x| s.max(*x));
    let normalized: Vec<f64> = v.iter().map(|x| x / vmax).collect();
    Ok(MountainLevel {
        m: mountain_from_s0(p, q, lambda, s0),
        s0,
        minimizer: sub.scatter(&normalized),
        iterations,
        residual: outcome.residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// A witness `0 ≤ v₀ ≤ u₀` on Ω₀ with `E_{Ω₀}(v₀) < 0`.
    InH,
    /// A witness `0 ≤ v₀ ≤ u₀` on Ω₀ in the unstable set (`E < m`, `I < 0`).
    InHu,
    /// A dominating field `w ≥ u₀` in the stable set of Ω (`E < m`, `I > 0`).
    InHs,
    NoneEstablished,
}

#[derive(Clone, Debug)]
pub struct WellReport {
    /// `E_{Ω₀}` of `u₀` restricted to Ω₀.
    pub energy: f64,
    /// `I_{Ω₀}` of `u₀` restricted to Ω₀.
    pub nehari: f64,
    /// `θ*` of `u₀` restricted to Ω₀ (`None` when it vanishes there).
    pub theta_star: Option<f64>,
    /// Mountain level and `S₀` on Ω₀.
    pub m: f64,
    pub s0: f64,
    /// Mountain level on Ω, used for the stable-set search.
    pub m_domain: f64,
    pub membership: Membership,
    pub witness: Option<Field>,
}

/// Eigenfields and mountain levels needed to classify initial data.
pub struct WellContext<'a> {
    pb: &'a Problem,
    refuge_op: std::sync::Arc<NonlocalOperator>,
    phi_refuge: Field,
    phi_domain: Field,
    refuge_level: MountainLevel,
    domain_level: MountainLevel,
}

/// Number of points of the log-spaced θ grids.
pub const THETA_GRID: usize = 32;

impl<'a> WellContext<'a> {
    pub fn new(pb: &'a Problem) -> Result<Self> {
        let p = pb.p();
        check_superlinear(p, pb.q())?;
        let op = pb.op();
        let grid = op.grid();
        let opts = EigenOptions::default();
        let unit = |f: &Field| f.scaled(1.0 / f.linf());
        let refuge = first_eigen(op, grid.refuge_mask(), &opts)?;
        let domain = first_eigen(op, op.active_mask(), &opts)?;
        let refuge_level = mountain_level(op, grid.refuge_mask(), pb.lambda(), pb.q(), &opts)?;
        let domain_level = mountain_level(op, op.active_mask(), pb.lambda(), pb.q(), &opts)?;
        Ok(WellContext {
            pb,
            refuge_op: pb.refuge_operator()?,
            phi_refuge: unit(&refuge.eigenfield),
            phi_domain: unit(&domain.eigenfield),
            refuge_level,
            domain_level,
        })
    }

    pub fn refuge_level(&self) -> &MountainLevel {
        &self.refuge_level
    }

    pub fn domain_level(&self) -> &MountainLevel {
        &self.domain_level
    }

    /// First eigenfield of Ω₀ with unit max norm.
    pub fn phi_refuge(&self) -> &Field {
        &self.phi_refuge
    }

    /// First eigenfield of Ω with unit max norm.
    pub fn phi_domain(&self) -> &Field {
        &self.phi_domain
    }

    fn refuge_energies(&self, v: &Field) -> WellEnergies {
        let vc = v.gather(self.refuge_op.active_nodes());
        well_energies_compact(&self.refuge_op, &vc, self.pb.lambda(), self.pb.q())
    }

    /// Searches the witness families for membership of `u0`.
    pub fn classify(&self, u0: &Field) -> Result<WellReport> {
        let pb = self.pb;
        let op = pb.op();
        op.gather(u0)?;
        if u0.values().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidField("initial datum must be nonnegative".into()));
        }
        let lambda = pb.lambda();
        let q = pb.q();
        let p = pb.p();
        let m = self.refuge_level.m;
        let own = self.refuge_energies(u0);
        let restricted = u0.gather(self.refuge_op.active_nodes());
        let b = lm_power(&restricted, q + 1.0, op.cell_volume());
        let theta_star =
            (b > 0.0).then(|| theta_from_parts(self.refuge_op.energy_compact(&restricted), b, lambda, p, q));

        let mut report = WellReport {
            energy: own.energy,
            nehari: own.nehari,
            theta_star,
            m,
            s0: self.refuge_level.s0,
            m_domain: self.domain_level.m,
            membership: Membership::NoneEstablished,
            witness: None,
        };
        let top = u0.linf();
        if top == 0.0 {
            return Ok(report);
        }
        let grid_points =
            |lo: f64, hi: f64| (0..THETA_GRID).map(move |k| lo * (hi / lo).powf(k as f64 / (THETA_GRID - 1) as f64));
        let witnesses: Vec<Field> = grid_points(1e-3 * top, 1e3 * top)
            .map(|theta| u0.zip_with(&self.phi_refuge, |a, f| a.min(theta * f)))
            .collect();
        let energies: Vec<WellEnergies> = witnesses.iter().map(|w| self.refuge_energies(w)).collect();
        if let Some(k) = energies.iter().position(|e| e.energy < 0.0) {
            report.membership = Membership::InH;
            report.witness = Some(witnesses[k].clone());
            return Ok(report);
        }
        if let Some(k) = energies.iter().position(|e| e.energy < m && e.nehari < 0.0) {
            report.membership = Membership::InHu;
            report.witness = Some(witnesses[k].clone());
            return Ok(report);
        }
        // Smallest multiple of φ_Ω dominating u0, then larger ones.
        let floor = op
            .active_nodes()
            .iter()
            .map(|&i| u0.values()[i] / self.phi_domain.values()[i])
            .fold(0.0f64, f64::max);
        if floor.is_finite() && floor > 0.0 {
            let m_domain = self.domain_level.m;
            for theta in grid_points(floor, 1e3 * floor) {
                let w = self.phi_domain.scaled(theta);
                let e = well_energies_compact(op, &op.gather(&w)?, lambda, q);
                if e.energy < m_domain && e.nehari > 0.0 {
                    report.membership = Membership::InHs;
                    report.witness = Some(w);
                    return Ok(report);
                }
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper building a [`WellContext`] for a single datum.
pub fn classify_initial(pb: &Problem, u0: &Field) -> Result<WellReport> {
    WellContext::new(pb)?.classify(u0)
}

/// Least-squares fit of `Y^{1-γ}` against `t`, `Y = l2_refuge²`, `γ = (q+1)/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupFit {
    pub gamma: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Zero of the fitted line when it decreases toward zero.
    pub t_max: Option<f64>,
    pub points: usize,
}

fn line_fit(t: &[f64], z: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let zm = z.iter().sum::<f64>() / n;
    let mut stt = 0.0;
    let mut stz = 0.0;
    let mut szz = 0.0;
    for (a, b) in t.iter().zip(z) {
        stt += (a - tm) * (a - tm);
        stz += (a - tm) * (b - zm);
        szz += (b - zm) * (b - zm);
    }
    let slope = if stt > 0.0 { stz / stt } else { 0.0 };
    let intercept = zm - slope * tm;
    let r_squared = if szz > 0.0 { stz * stz / (stt * szz) } else { 0.0 };
    (slope, intercept, r_squared)
}

/// Tail window: the last quarter of `(t, y)` trimmed to its monotone increasing end.
fn tail_window(t: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = t.len();
    if n < 4 {
        return None;
    }
    let mut start = n - (n / 4).max(3);
    let mut k = n - 1;
    while k > start && y[k - 1] < y[k] {
        k -= 1;
    }
    start = start.max(k);
    if n - start < 3 {
        return None;
    }
    Some((t[start..].to_vec(), y[start..].to_vec()))
}

/// Fits `Y^{1-γ}` on the tail of the series.
pub fn fit_blowup_series(t: &[f64], y: &[f64], q: f64) -> Option<BlowupFit> {
    let gamma = (q + 1.0) / 2.0;
    let (tw, yw) = tail_window(t, y)?;
    let z: Vec<f64> = yw.iter().map(|v| v.powf(1.0 - gamma)).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (slope, intercept, r_squared) = line_fit(&tw, &z);
    let t_max = (gamma > 1.0 && slope < 0.0).then(|| -intercept / slope);
    Some(BlowupFit {
        gamma,
        slope,
        intercept,
        r_squared,
        t_max,
        points: tw.len(),
    })
}

pub(crate) fn fit_blowup(series: &[SeriesRow], q: f64) -> Option<BlowupFit> {
    let t: Vec<f64> = series.iter().map(|r| r.t).collect();
    let y: Vec<f64> = series.iter().map(|r| r.l2_refuge * r.l2_refuge).collect();
    fit_blowup_series(&t, &y, q)
}

/// Exponential growth fit `log Y ≈ a + κ t` on the tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub rate: f64,
    pub r_squared: f64,
}

pub fn fit_growth_series(t: &[f64], y: &[f64]) -> Option<GrowthFit> {
    let (tw, yw) = tail_window(t, y)?;
    if yw.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let z: Vec<f64> = yw.iter().map(|v| v.ln()).collect();
    let (rate, _, r_squared) = line_fit(&tw, &z);
    Some(GrowthFit { rate, r_squared })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizationTarget {
    Steady,
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub classification: Classification,
    pub target: Option<StabilizationTarget>,
    pub t_max_estimate: Option<f64>,
    pub blowup_fit: Option<BlowupFit>,
    pub growth_fit: Option<GrowthFit>,
    /// `‖u(T) - u_λ‖_2 / ‖u_λ‖_2` when a steady state was supplied.
    pub terminal_distance: Option<f64>,
    /// `‖u(T)‖_∞ / ‖u(0)‖_∞`.
    pub decay_ratio: f64,
    /// `‖u_n - u_{n-1}‖_2 / (Δt ‖u_n‖_2)` at the last step.
    pub terminal_rate: f64,
}

/// Relative rate below which a run counts as stationary.
pub const STATIONARY_RATE: f64 = 1e-6;
/// Decay factor below which a run counts as stabilized at zero.
pub const DECAY_FACTOR: f64 = 1e-2;
/// Relative L² distance below which a run counts as stabilized at `u_λ`.
pub const STEADY_DISTANCE: f64 = 1e-3;
/// Decay factor below which a run counts as extinct.
pub const EXTINCTION_FACTOR: f64 = 1e-10;

/// Classifies a completed run from its series; `steady` is the elliptic
/// solution used as the stabilization target, if known.
pub fn classify_trajectory(traj: &Trajectory, pb: &Problem, steady: Option<&Field>) -> Result<TrajectoryReport> {
    let series = &traj.series;
    let first = series
        .first()
        .ok_or_else(|| Error::InvalidField("empty trajectory".into()))?;
    let last = series.last().expect("nonempty");
    let q = pb.q();
    let t: Vec<f64> = series.iter().map(|r| r.t).collect();
    let y: Vec<f64> = series.iter().map(|r| r.l2_refuge * r.l2_refuge).collect();
    let terminal_distance = match steady {
        Some(s) => {
            let diff = traj.final_field.zip_with(s, |a, b| a - b);
            Some(diff.l2() / s.l2())
        }
        None => None,
    };
    let decay_ratio = if first.linf > 0.0 { last.linf / first.linf } else { 0.0 };
    let terminal_rate = if series.len() > 1 && last.l2_omega > 0.0 {
        last.step_increment_l2 / (last.dt * last.l2_omega)
    } else {
        0.0
    };
    let mut report = TrajectoryReport {
        classification: Classification::Running,
        target: None,
        t_max_estimate: None,
        blowup_fit: fit_blowup_series(&t, &y, q),
        growth_fit: fit_growth_series(&t, &y),
        terminal_distance,
        decay_ratio,
        terminal_rate,
    };
    let capped = matches!(
        traj.classification,
        Classification::BlowupFinite | Classification::BlowupSuspected | Classification::BlowupInfinite
    );
    let growing = report.growth_fit.as_ref().is_some_and(|g| g.rate > 0.0)
        && y.windows(2).skip(series.len() * 3 / 4).all(|w| w[1] > w[0])
        && last.l2_refuge > 10.0 * first.l2_refuge
        // Growth still below an existing steady state is an approach to it.
        && steady.is_none_or(|s| last.linf > s.linf());
    report.classification = if traj.classification == Classification::Extinct || decay_ratio < EXTINCTION_FACTOR {
        Classification::Extinct
    } else if capped && q > 1.0 {
        report.t_max_estimate = report.blowup_fit.as_ref().and_then(|f| f.t_max);
        if report.t_max_estimate.is_some() {
            Classification::BlowupFinite
        } else {
            Classification::BlowupSuspected
        }
    } else if capped || (growing && q <= 1.0) {
        Classification::BlowupInfinite
    } else if terminal_distance.is_some_and(|d| d < STEADY_DISTANCE) {
        report.target = Some(StabilizationTarget::Steady);
        Classification::Stabilized
    } else if decay_ratio < DECAY_FACTOR
        && series
            .windows(2)
            .skip(series.len() * 3 / 4)
            .all(|w| w[1].linf <= w[0].linf)
    {
        report.target = Some(StabilizationTarget::Zero);
        Classification::Stabilized
    } else if terminal_rate < STATIONARY_RATE {
        report.target = Some(StabilizationTarget::Steady);
        Classification::Stabilized
    } else {
        Classification::Running
    };
    Ok(report)
}
