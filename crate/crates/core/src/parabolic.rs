//! Truncated semi-implicit time stepping for
//! `∂_t u + L u + b u^r = λ u^q` in Ω, `u = 0` outside.
//!
//! Step `n` solves
//!
//! ```text
//! (u_n - u_{n-1}) / Δt + L u_n + b |u_n|^{r-1} u_n = λ min(R, u_{n-1})^q
//! ```
//!
//! as the minimizer of the strictly convex functional
//! `F(v) = ½ h^d Σ (v - g)² + Δt (‖v‖^p / p + h^d Σ b |v|^{r+1} / (r+1))`
//! with `g = u_{n-1} + Δt λ min(R, u_{n-1})^q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{fit_blowup, BlowupFit};
use crate::elliptic::Problem;
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::nonlocal_op::{phi, NonlocalOperator};
use crate::optim::{self, SpgOptions};

/// Exponents within this distance of 1 count as `q = 1`.
const LINEAR_EPS: f64 = 1e-12;

/// Guaranteed existence horizon and the truncation level realizing it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// `+∞` when every horizon is admissible.
    pub t_star: f64,
    /// Maximizing truncation level; `None` when no finite maximizer exists.
    pub truncation: Option<f64>,
}

/// `T_*` from the bound `‖u₀‖_∞ + λ T R^q < R`.
pub fn horizon_policy(pb: &Problem, u0: &Field) -> Result<Horizon> {
    pb.op().gather(u0)?;
    let q = pb.q();
    let lambda = pb.lambda();
    let m0 = u0.linf();
    if (q - 1.0).abs() <= LINEAR_EPS {
        return Ok(Horizon {
            t_star: 1.0 / lambda,
            truncation: None,
        });
    }
    if q < 1.0 || m0 == 0.0 {
        return Ok(Horizon {
            t_star: f64::INFINITY,
            truncation: None,
        });
    }
    // (R - m0) / (λ R^q) peaks at R = q m0 / (q - 1).
    let r = q * m0 / (q - 1.0);
    Ok(Horizon {
        t_star: (r - m0) / (lambda * r.powf(q)),
        truncation: Some(r),
    })
}

/// A truncation level satisfying the horizon bound on `[0, min(T, T_*/2)]`.
pub fn truncation_for(pb: &Problem, u0_linf: f64, horizon: f64) -> f64 {
    let q = pb.q();
    let m0 = u0_linf;
    if m0 == 0.0 {
        return 1.0;
    }
    if q < 1.0 - LINEAR_EPS {
        // R^{1-q} ≥ 2λT gives λ T R^q ≤ R / 2; R ≥ 4 m0 leaves room for m0.
        let growth = (2.0 * pb.lambda() * horizon).powf(1.0 / (1.0 - q));
        2.0 * growth.max(2.0 * m0)
    } else if (q - 1.0).abs() <= LINEAR_EPS {
        // With λ T ≤ 1/2: m0 + λ T R ≤ 3 m0 < R.
        4.0 * m0
    } else {
        q * m0 / (q - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    /// Time step; defaults to `min(0.01, T_*/100)`.
    pub dt: Option<f64>,
    /// Final time `T`.
    pub horizon: f64,
    /// Initial truncation level; defaults to the horizon policy.
    pub truncation: Option<f64>,
    pub blowup_cap: f64,
    /// Runs stop as extinct once `‖u‖_∞` drops below this level.
    pub extinction_tolerance: f64,
    /// Relative max-norm gradient tolerance of each step's solve.
    pub inner_tolerance: f64,
    pub inner_max_iterations: usize,
    /// Relative size of negative values that are clamped instead of fatal.
    pub negativity_tolerance: f64,
    pub max_halvings: u32,
    /// Store a snapshot every `stride` steps (0: first and last only).
    pub snapshot_stride: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            dt: None,
            horizon: 1.0,
            truncation: None,
            blowup_cap: 1e6,
            extinction_tolerance: 1e-12,
            inner_tolerance: 1e-10,
            inner_max_iterations: 20_000,
            negativity_tolerance: 1e-8,
            max_halvings: 6,
            snapshot_stride: 0,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be positive and finite, got {x}")))
            }
        };
        positive("horizon", self.horizon)?;
        positive("blowup_cap", self.blowup_cap)?;
        positive("inner_tolerance", self.inner_tolerance)?;
        if let Some(dt) = self.dt {
            positive("dt", dt)?;
            if dt > self.horizon {
                return Err(Error::param(
                    "dt",
                    format!("must not exceed the horizon {}", self.horizon),
                ));
            }
        }
        if let Some(r) = self.truncation {
            positive("truncation", r)?;
        }
        if !(self.extinction_tolerance >= 0.0) {
            return Err(Error::param("extinction_tolerance", "must be nonnegative"));
        }
        if !(self.negativity_tolerance >= 0.0) {
            return Err(Error::param("negativity_tolerance", "must be nonnegative"));
        }
        if self.inner_max_iterations == 0 {
            return Err(Error::param("inner_max_iterations", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Running,
    Stabilized,
    BlowupFinite,
    BlowupInfinite,
    BlowupSuspected,
    Extinct,
    HorizonReached,
}

/// Per-step scalars; row 0 describes the initial datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub linf: f64,
    pub l2_omega: f64,
    pub l2_refuge: f64,
    pub energy: f64,
    pub energy_refuge: f64,
    pub nehari_refuge: f64,
    /// `E(u_n) - E(u_{n-1}) + Δt h^d Σ ((u_n - u_{n-1}) / Δt)²`.
    pub defect: f64,
    pub step_increment_l2: f64,
    pub dt: f64,
    pub truncation: f64,
    /// Whether `min(R, u_{n-1})` differed from `u_{n-1}` in this step.
    pub truncation_active: bool,
    /// `‖u₀‖_∞ + λ Σ Δt_k R_k^q`.
    pub linf_bound: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub series: Vec<SeriesRow>,
    pub snapshots: Vec<(f64, Field)>,
    pub final_field: Field,
    pub classification: Classification,
    pub t_max_estimate: Option<f64>,
    pub fit: Option<BlowupFit>,
    /// `(t, R)` whenever the truncation level changes.
    pub truncation_events: Vec<(f64, f64)>,
    /// `(t, Δt)` whenever the step changes.
    pub dt_history: Vec<(f64, f64)>,
    pub horizon: Horizon,
    /// True when the requested horizon exceeds `T_*`.
    pub horizon_override: bool,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.series.iter().map(|r| r.t).collect()
    }

    pub fn steps(&self) -> usize {
        self.series.len().saturating_sub(1)
    }

    /// Series CSV with header
    /// `t,linf,l2_omega,l2_refuge,E,E_refuge,I_refuge,dE_defect,step_increment_l2,dt,R`.
    pub fn series_csv(&self) -> String {
        let header = [
            "t",
            "linf",
            "l2_omega",
            "l2_refuge",
            "E",
            "E_refuge",
            "I_refuge",
            "dE_defect",
            "step_increment_l2",
            "dt",
            "R",
        ];
        crate::io::series_csv(
            &header,
            self.series.iter().map(|r| {
                vec![
                    r.t,
                    r.linf,
                    r.l2_omega,
                    r.l2_refuge,
                    r.energy,
                    r.energy_refuge,
                    r.nehari_refuge,
                    r.defect,
                    r.step_increment_l2,
                    r.dt,
                    r.truncation,
                ]
            }),
        )
    }
}

/// Failure of a run, with everything computed before it.
#[derive(Debug)]
pub struct EvolveError {
    pub error: Error,
    pub partial: Box<Trajectory>,
}

impl std::fmt::Display for EvolveError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.partial.series.last().map_or(0.0, |r| r.t);
        write!(f, "evolution stopped at t = {t}: {}", self.error)
    }
}

impl std::error::Error for EvolveError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<EvolveError> for Error {
    fn from(e: EvolveError) -> Self {
        e.error
    }
}

/// Data of one resolvent problem `v + Δt 𝒜 v = g` on active nodes.
#[derive(Clone, Copy)]
struct Resolvent<'a> {
    op: &'a NonlocalOperator,
    b: &'a [f64],
    r: f64,
    dt: f64,
}

impl Resolvent<'_> {
    /// `F(v)`; writes `∇F(v) / h^d` into `grad` (the nodal residual).
    fn evaluate(&self, v: &[f64], g: &[f64], lv: &mut [f64], grad: &mut [f64]) -> f64 {
        let volume = self.op.cell_volume();
        let p = self.op.p();
        let a = self.op.energy_and_apply(v, lv);
        let mut quad = 0.0;
        let mut abs = 0.0;
        for i in 0..v.len() {
            let d = v[i] - g[i];
            quad += d * d;
            let mut nodal = d + self.dt * lv[i];
            if self.b[i] != 0.0 {
                let ph = phi(self.r + 1.0, v[i]);
                abs += self.b[i] * ph * v[i];
                nodal += self.dt * self.b[i] * ph;
            }
            grad[i] = nodal;
        }
        volume * (0.5 * quad + self.dt * abs / (self.r + 1.0)) + self.dt * a / p
    }

    fn solve(&self, g: &[f64], start: Vec<f64>, tol: f64, max_iterations: usize) -> Result<(Vec<f64>, f64, usize)> {
        let n = g.len();
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return Ok((vec![0.0; n], 0.0, 0));
        }
        let volume = self.op.cell_volume();
        let mut lv = vec![0.0; n];
        let mut nodal = vec![0.0; n];
        let mut objective = |v: &[f64], grad: &mut [f64]| -> f64 {
            let f = self.evaluate(v, g, &mut lv, &mut nodal);
            for i in 0..n {
                grad[i] = volume * nodal[i];
            }
            f
        };
        let residual = |_v: &[f64], _f: f64, grad: &[f64]| -> f64 {
            grad.iter().fold(0.0f64, |m, x| m.max(x.abs())) / (volume * scale)
        };
        let metric: Vec<f64> = self
            .op
            .total_weights()
            .iter()
            .map(|t| 1.0 / (volume * (1.0 + 2.0 * self.dt * t)))
            .collect();
        let spg = SpgOptions {
            max_iterations,
            tolerance: tol,
            nonnegative: false,
            scaling: Some(metric),
            ..Default::default()
        };
        let mut x = start;
        let mut iterations = 0;
        loop {
            let run = SpgOptions {
                max_iterations: max_iterations.saturating_sub(iterations),
                ..spg.clone()
            };
            let out = optim::minimize(&mut objective, x, &run, residual);
            iterations += out.iterations;
            if out.converged {
                return Ok((out.x, out.residual, iterations));
            }
            if out.iterations == 0 || iterations >= max_iterations {
                return Err(Error::NonConvergence {
                    stage: "implicit step",
                    iterations,
                    residual: out.residual,
                    last_iterate: self.op.scatter(&out.x).into_values(),
                });
            }
            x = out.x;
        }
    }
}

/// Source-augmented datum `g = u + Δt λ min(R, u)^q`.
fn step_datum(pb: &Problem, u: &[f64], dt: f64, truncation: f64) -> Vec<f64> {
    u.iter()
        .map(|&x| x + dt * pb.lambda() * x.min(truncation).max(0.0).powf(pb.q()))
        .collect()
}

fn check_step_inputs(pb: &Problem, u: &[f64], dt: f64, truncation: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    if !(truncation > 0.0) {
        return Err(Error::param(
            "truncation",
            format!("must be positive, got {truncation}"),
        ));
    }
    if let Some(i) = u.iter().position(|&x| x < 0.0) {
        return Err(Error::NegativeIterate {
            node: pb.op().active_nodes()[i],
            value: u[i],
        });
    }
    Ok(())
}

/// Compact step with the negativity rule applied.
fn step_compact(pb: &Problem, u: &[f64], dt: f64, truncation: f64, cfg: &SchemeConfig) -> Result<(Vec<f64>, usize)> {
    let g = step_datum(pb, u, dt, truncation);
    let c = pb.compact();
    let res = Resolvent {
        op: c.op,
        b: c.b,
        r: pb.r(),
        dt,
    };
    let (mut v, _, iterations) = res.solve(&g, u.to_vec(), cfg.inner_tolerance, cfg.inner_max_iterations)?;
    let gmax = g.iter().fold(0.0f64, |m, x| m.max(*x));
    let floor = -cfg.negativity_tolerance * gmax;
    for (i, x) in v.iter_mut().enumerate() {
        if *x < floor {
            return Err(Error::NegativeIterate {
                node: pb.op().active_nodes()[i],
                value: *x,
            });
        }
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    Ok((v, iterations))
}

/// One step of the scheme from `u_prev`.
pub fn implicit_step(pb: &Problem, u_prev: &Field, dt: f64, truncation: f64) -> Result<Field> {
    implicit_step_with(pb, u_prev, dt, truncation, &SchemeConfig::default())
}

pub fn implicit_step_with(pb: &Problem, u_prev: &Field, dt: f64, truncation: f64, cfg: &SchemeConfig) -> Result<Field> {
    let u = pb.op().gather(u_prev)?;
    check_step_inputs(pb, &u, dt, truncation)?;
    let (v, _) = step_compact(pb, &u, dt, truncation, cfg)?;
    Ok(pb.op().scatter(&v))
}

/// Optimality and convexity certificate of a computed step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepCertificate {
    /// `‖∇F(u_n)‖_∞ / (h^d ‖g‖_∞)`.
    pub gradient_norm: f64,
    /// Difference quotients `⟨∇F(u + εd) - ∇F(u), d⟩ / (ε ‖d‖²)` along random `d`.
    pub curvatures: Vec<f64>,
}

impl StepCertificate {
    pub fn holds(&self, tol: f64) -> bool {
        self.gradient_norm < tol && self.curvatures.iter().all(|&c| c > 0.0)
    }
}

pub fn certify_step(
    pb: &Problem,
    u_prev: &Field,
    u_next: &Field,
    dt: f64,
    truncation: f64,
    seed: u64,
) -> Result<StepCertificate> {
    let op = pb.op();
    let u = op.gather(u_prev)?;
    let v = op.gather(u_next)?;
    let g = step_datum(pb, &u, dt, truncation);
    let c = pb.compact();
    let res = Resolvent {
        op: c.op,
        b: c.b,
        r: pb.r(),
        dt,
    };
    let n = v.len();
    let mut lv = vec![0.0; n];
    let mut grad = vec![0.0; n];
    res.evaluate(&v, &g, &mut lv, &mut grad);
    let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let gradient_norm = grad.iter().fold(0.0f64, |m, x| m.max(x.abs())) / gmax;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut curvatures = Vec::with_capacity(5);
    let mut grad2 = vec![0.0; n];
    for _ in 0..5 {
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-6 * vmax;
        let shifted: Vec<f64> = v.iter().zip(&d).map(|(x, y)| x + eps * y).collect();
        res.evaluate(&shifted, &g, &mut lv, &mut grad2);
        let num: f64 = (0..n).map(|i| (grad2[i] - grad[i]) * d[i]).sum();
        let den: f64 = d.iter().map(|x| x * x).sum();
        curvatures.push(num / (eps * den));
    }
    Ok(StepCertificate {
        gradient_norm,
        curvatures,
    })
}

/// Resolvent pair report for `u + δ𝒜u = f`, `v + δ𝒜v = g`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccretivityReport {
    pub solution_gap: f64,
    pub data_gap: f64,
    pub contraction_holds: bool,
    /// `Some(ordered)` when `f ≤ g` nodewise: whether `u ≤ v + tol` as well.
    pub order_preserved: Option<bool>,
}

/// Solves both resolvent problems with the step solver (source disabled)
/// and checks `‖u - v‖_∞ ≤ ‖f - g‖_∞ + tol`.
pub fn accretivity_test(pb: &Problem, f: &Field, g: &Field, delta: f64, tol: f64) -> Result<AccretivityReport> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::param("delta", format!("must be positive, got {delta}")));
    }
    let op = pb.op();
    let fc = op.gather(f)?;
    let gc = op.gather(g)?;
    let c = pb.compact();
    let res = Resolvent {
        op: c.op,
        b: c.b,
        r: pb.r(),
        dt: delta,
    };
    let inner = SchemeConfig::default();
    let tight = inner.inner_tolerance.min(1e-12);
    let (u, _, _) = res.solve(&fc, fc.clone(), tight, inner.inner_max_iterations)?;
    let (v, _, _) = if fc == gc {
        (u.clone(), 0.0, 0)
    } else {
        res.solve(&gc, gc.clone(), tight, inner.inner_max_iterations)?
    };
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let solution_gap = gap(&u, &v);
    let data_gap = gap(&fc, &gc);
    let ordered = fc.iter().zip(&gc).all(|(a, b)| a <= b);
    let order_preserved = ordered.then(|| u.iter().zip(&v).all(|(a, b)| *a <= *b + tol));
    Ok(AccretivityReport {
        solution_gap,
        data_gap,
        contraction_holds: solution_gap <= data_gap + tol,
        order_preserved,
    })
}

/// Evaluates the per-step scalars of a compact state.
struct Recorder<'a> {
    pb: &'a Problem,
    refuge_op: std::sync::Arc<NonlocalOperator>,
    refuge_positions: Vec<usize>,
}

impl<'a> Recorder<'a> {
    fn new(pb: &'a Problem) -> Result<Self> {
        let refuge_op = pb.refuge_operator()?;
        let op = pb.op();
        let mut position = vec![usize::MAX; op.grid().node_count()];
        for (k, &node) in op.active_nodes().iter().enumerate() {
            position[node] = k;
        }
        let refuge_positions = refuge_op.active_nodes().iter().map(|&node| position[node]).collect();
        Ok(Recorder {
            pb,
            refuge_op,
            refuge_positions,
        })
    }

    /// `(linf, l2_omega, l2_refuge, E, E_refuge, I_refuge)`.
    fn scalars(&self, u: &[f64]) -> [f64; 6] {
        let volume = self.pb.op().cell_volume();
        let c = self.pb.compact();
        let parts = c.parts(u);
        let energy = c.energy(parts);
        let linf = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let l2_omega = (volume * u.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let refuge: Vec<f64> = self
            .refuge_positions
            .iter()
            .map(|&k| if k == usize::MAX { 0.0 } else { u[k] })
            .collect();
        let l2_refuge = (volume * refuge.iter().map(|x| x * x).sum::<f64>()).sqrt();
        let well = crate::diagnostics::well_energies_compact(&self.refuge_op, &refuge, self.pb.lambda(), self.pb.q());
        [linf, l2_omega, l2_refuge, energy, well.energy, well.nehari]
    }
}

/// Runs the scheme from `u0` up to `cfg.horizon`, the blow-up cap, or extinction.
pub fn evolve(pb: &Problem, u0: &Field, cfg: &SchemeConfig) -> std::result::Result<Trajectory, EvolveError> {
    let empty = |error: Error| EvolveError {
        error,
        partial: Box::new(Trajectory {
            series: Vec::new(),
            snapshots: Vec::new(),
            final_field: u0.clone(),
            classification: Classification::Running,
            t_max_estimate: None,
            fit: None,
            truncation_events: Vec::new(),
            dt_history: Vec::new(),
            horizon: Horizon {
                t_star: f64::NAN,
                truncation: None,
            },
            horizon_override: false,
        }),
    };
    cfg.validate().map_err(empty)?;
    let op = pb.op();
    let mut u = op.gather(u0).map_err(empty)?;
    if let Some(i) = u.iter().position(|&x| x < 0.0) {
        return Err(empty(Error::InvalidField(format!(
            "initial datum is negative at node {}",
            op.active_nodes()[i]
        ))));
    }
    let m0 = u.iter().fold(0.0f64, |m, x| m.max(*x));
    if cfg.blowup_cap <= m0 {
        return Err(empty(Error::param("blowup_cap", format!("must exceed ‖u₀‖_∞ = {m0}"))));
    }
    let horizon = horizon_policy(pb, u0).map_err(empty)?;
    let recorder = Recorder::new(pb).map_err(empty)?;
    let mut dt = cfg.dt.unwrap_or_else(|| {
        let t_star = if horizon.t_star.is_finite() {
            horizon.t_star
        } else {
            f64::INFINITY
        };
        (0.01f64).min(t_star / 100.0).min(cfg.horizon)
    });
    let mut truncation = cfg.truncation.unwrap_or_else(|| {
        horizon
            .truncation
            .unwrap_or_else(|| truncation_for(pb, m0, cfg.horizon.min(0.5 * horizon.t_star)))
    });

    let s0 = recorder.scalars(&u);
    let mut traj = Trajectory {
        series: vec![SeriesRow {
            t: 0.0,
            linf: s0[0],
            l2_omega: s0[1],
            l2_refuge: s0[2],
            energy: s0[3],
            energy_refuge: s0[4],
            nehari_refuge: s0[5],
            defect: 0.0,
            step_increment_l2: 0.0,
            dt,
            truncation,
            truncation_active: false,
            linf_bound: m0,
        }],
        snapshots: vec![(0.0, u0.clone())],
        final_field: u0.clone(),
        classification: Classification::Running,
        t_max_estimate: None,
        fit: None,
        truncation_events: vec![(0.0, truncation)],
        dt_history: vec![(0.0, dt)],
        horizon,
        horizon_override: cfg.horizon > horizon.t_star,
    };
    let fail = |traj: Trajectory, u: &[f64], error: Error| {
        let mut traj = traj;
        traj.final_field = pb.op().scatter(u);
        EvolveError {
            error,
            partial: Box::new(traj),
        }
    };

    let volume = op.cell_volume();
    let end = cfg.horizon;
    let mut t = 0.0;
    let mut halvings = 0;
    let mut bound = m0;
    let mut steps = 0usize;
    let q = pb.q();
    while t < end * (1.0 - 1e-12) {
        let linf = u.iter().fold(0.0f64, |m, x| m.max(*x));
        while linf > 0.5 * truncation {
            truncation *= 2.0;
            traj.truncation_events.push((t, truncation));
        }
        let h = dt.min(end - t);
        let outcome = step_compact(pb, &u, h, truncation, cfg);
        let (next, _) = match outcome {
            Ok(v) => v,
            Err(e @ Error::NonConvergence { .. }) => {
                if halvings >= cfg.max_halvings {
                    return Err(fail(traj, &u, e));
                }
                halvings += 1;
                dt *= 0.5;
                traj.dt_history.push((t, dt));
                continue;
            }
            Err(e) => return Err(fail(traj, &u, e)),
        };
        let truncation_active = linf > truncation;
        // Land on the horizon exactly instead of a rounding short of it.
        t = if t + h >= end * (1.0 - 1e-12) { end } else { t + h };
        steps += 1;
        bound += pb.lambda() * h * truncation.powf(q);
        let s = recorder.scalars(&next);
        let increment_sq: f64 = next.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * volume;
        let previous_energy = traj.series.last().map_or(0.0, |r| r.energy);
        traj.series.push(SeriesRow {
            t,
            linf: s[0],
            l2_omega: s[1],
            l2_refuge: s[2],
            energy: s[3],
            energy_refuge: s[4],
            nehari_refuge: s[5],
            defect: s[3] - previous_energy + increment_sq / h,
            step_increment_l2: increment_sq.sqrt(),
            dt: h,
            truncation,
            truncation_active,
            linf_bound: bound,
        });
        u = next;
        if cfg.snapshot_stride > 0 && steps.is_multiple_of(cfg.snapshot_stride) {
            traj.snapshots.push((t, op.scatter(&u)));
        }
        if s[0] > cfg.blowup_cap {
            let fit = fit_blowup(&traj.series, q);
            traj.classification = match &fit {
                Some(f) if q > 1.0 && f.t_max.is_some() => Classification::BlowupFinite,
                _ => Classification::BlowupSuspected,
            };
            traj.t_max_estimate = fit.as_ref().and_then(|f| f.t_max);
            traj.fit = fit;
            break;
        }
        if s[0] < cfg.extinction_tolerance {
            traj.classification = Classification::Extinct;
            break;
        }
    }
    if traj.classification == Classification::Running {
        traj.classification = Classification::HorizonReached;
    }
    let final_field = op.scatter(&u);
    if traj.snapshots.last().is_none_or(|(ts, _)| *ts != t) {
        traj.snapshots.push((t, final_field.clone()));
    }
    traj.final_field = final_field;
    Ok(traj)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyAudit {
    pub max_defect: f64,
    /// `max |D_n| / Δt_n`, the defect per unit time.
    pub max_defect_rate: f64,
    /// `E` non-increasing over the steps with inactive truncation.
    pub energy_nonincreasing: bool,
    /// Largest increase of `E` over such steps.
    pub max_energy_increase: f64,
    pub audited_steps: usize,
}

/// Defect statistics of the discrete energy identity.
pub fn energy_audit(traj: &Trajectory) -> EnergyAudit {
    let mut max_defect: f64 = 0.0;
    let mut max_rate: f64 = 0.0;
    let mut max_increase = f64::NEG_INFINITY;
    let mut audited = 0;
    let mut scale: f64 = 0.0;
    for w in traj.series.windows(2) {
        let row = &w[1];
        max_defect = max_defect.max(row.defect.abs());
        max_rate = max_rate.max(row.defect.abs() / row.dt);
        scale = scale.max(row.energy.abs()).max(w[0].energy.abs());
        if !row.truncation_active {
            max_increase = max_increase.max(row.energy - w[0].energy);
            audited += 1;
        }
    }
    // Rounding allowance for the energy evaluation itself.
    let slack = 1e-12 * scale.max(f64::MIN_POSITIVE);
    EnergyAudit {
        max_defect,
        max_defect_rate: max_rate,
        energy_nonincreasing: audited == 0 || max_increase <= slack,
        max_energy_increase: if audited == 0 { 0.0 } else { max_increase },
        audited_steps: audited,
    }
}

/// Draws `count` random resolvent pairs and runs [`accretivity_test`] on each.
pub fn accretivity_suite(
    pb: &Problem,
    count: usize,
    delta: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<AccretivityReport>> {
    let op = pb.op();
    let grid = op.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(count);
    for k in 0..count {
        let amplitude = 10f64.powf(rng.gen_range(-1.0..1.0));
        let f: Vec<f64> = (0..op.len()).map(|_| amplitude * rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = if k % 2 == 0 {
            // Ordered pair: g ≥ f.
            f.iter().map(|x| x + amplitude * rng.gen_range(0.0..0.5)).collect()
        } else {
            (0..op.len()).map(|_| amplitude * rng.gen_range(-1.0..1.0)).collect()
        };
        let ff = Field::from_compact(grid, op.active_nodes(), &f);
        let gf = Field::from_compact(grid, op.active_nodes(), &g);
        reports.push(accretivity_test(pb, &ff, &gf, delta, tol)?);
    }
    Ok(reports)
}
