//! Mode execution and output persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, InitialKind, Mode, Support};
use super::verify::run_verify;
use crate::diagnostics::{classify_trajectory, mountain_level, theta_star, Membership, WellContext};
use crate::eigen::{first_eigen, weighted_eigen, EigenResult};
use crate::elliptic::{lambda_range, lambda_sweep, solve_steady, Problem, QClass, SteadyStatus};
use crate::error::{Error, Result};
use crate::grid::{build_absorption, build_grid, distance_profile, Field, GridMetadata, NodeMask};
use crate::io::{read_field_csv, write_field_csv, write_json};
use crate::nonlocal_op::{assemble_cached, NonlocalOperator, OperatorMetadata, OperatorParams};
use crate::parabolic::{energy_audit, evolve, Classification, Horizon, SeriesRow, Trajectory};

/// Process exit status of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Success,
    /// Reading or writing files failed.
    Io,
    /// Invalid configuration or input data.
    Validation,
    /// An iterative solver failed.
    Solver,
    /// The run completed but its classification is inconclusive.
    Inconclusive,
    /// A scenario or verification predicate failed.
    CheckFailed,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Io => 1,
            ExitStatus::Validation => 2,
            ExitStatus::Solver => 3,
            ExitStatus::Inconclusive => 4,
            ExitStatus::CheckFailed => 5,
        }
    }

    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::Io(_) | Error::Json(_) | Error::Cache { .. } => ExitStatus::Io,
            e if e.is_solver_failure() => ExitStatus::Solver,
            _ => ExitStatus::Validation,
        }
    }
}

/// Result of one mode run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub out_dir: PathBuf,
    /// Contents of `report.json` (`Null` when the run failed before writing it).
    pub report: Value,
    pub error: Option<String>,
}

/// Output directory bookkeeping and phase timings.
pub(crate) struct RunContext {
    out: PathBuf,
    timings: BTreeMap<String, f64>,
    outputs: Vec<String>,
    grid: Option<GridMetadata>,
    operator: Option<OperatorMetadata>,
    problem: Option<Value>,
    report: Value,
}

impl RunContext {
    fn new(out: &Path) -> Self {
        RunContext {
            out: out.to_path_buf(),
            timings: BTreeMap::new(),
            outputs: Vec::new(),
            grid: None,
            operator: None,
            problem: None,
            report: Value::Null,
        }
    }

    pub(crate) fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let value = f();
        *self.timings.entry(label.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        value
    }

    fn record(&mut self, rel: &str) {
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
    }

    pub(crate) fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text)?;
        self.record(rel);
        Ok(())
    }

    pub(crate) fn write_field(&mut self, rel: &str, field: &Field) -> Result<()> {
        write_field_csv(field, &self.out.join(rel))?;
        self.record(rel);
        Ok(())
    }

    fn write_report(&mut self, report: Value) -> Result<()> {
        write_json(&report, &self.out.join("report.json"))?;
        self.record("report.json");
        self.report = report;
        Ok(())
    }
}

/// Grid, operator and problem described by a configuration.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    build_problem_timed(cfg, None)
}

fn build_problem_timed(cfg: &ExperimentConfig, mut ctx: Option<&mut RunContext>) -> Result<Problem> {
    let mut timed = |label: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        match ctx.as_deref_mut() {
            Some(c) => c.time(label, f),
            None => f(),
        }
    };
    let spec = cfg.grid.domain_spec()?;
    let mut grid = None;
    timed("grid", &mut || {
        grid = Some(build_grid(&spec)?);
        Ok(())
    })?;
    let grid = grid.expect("grid built");
    let params = OperatorParams::new(cfg.operator.s, cfg.operator.p)?;
    let mut op = None;
    timed("assemble", &mut || {
        op = Some(match &cfg.operator.cache_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                assemble_cached(&grid, params, dir)?
            }
            None => NonlocalOperator::assemble(&grid, params)?,
        });
        Ok(())
    })?;
    let op = Arc::new(op.expect("operator assembled").with_parallel(cfg.operator.parallel));
    let b = build_absorption(&grid, cfg.problem.b0)?;
    let template = Problem::new(op, b, 1.0, cfg.problem.q, cfg.problem.r)?;
    let mut lambda = 0.0;
    timed("thresholds", &mut || {
        lambda = cfg.problem.lambda.resolve(&template)?;
        Ok(())
    })?;
    let pb = template.with_lambda(lambda)?;
    if cfg.problem.refuge_only {
        pb.refuge_only()
    } else {
        Ok(pb)
    }
}

fn support_mask(cfg: &ExperimentConfig, pb: &Problem) -> NodeMask {
    let active = pb.op().active_mask().clone();
    match cfg.initial.support {
        Support::Domain => active,
        Support::Refuge => active.and(pb.op().grid().refuge_mask()),
    }
}

fn unit_max(f: &Field) -> Field {
    f.scaled(1.0 / f.linf())
}

/// Initial datum described by `[initial]`, vanishing off the problem's mask.
pub fn initial_datum(cfg: &ExperimentConfig, pb: &Problem) -> Result<Field> {
    let init = &cfg.initial;
    let op = pb.op();
    let grid = op.grid();
    let mask = support_mask(cfg, pb);
    if mask.count() == 0 {
        return Err(Error::Config("initial.support: selects no active node".into()));
    }
    let eigen_opts = cfg.eigen.options();
    let profile = match init.kind {
        InitialKind::Zero => Field::zeros(grid),
        InitialKind::Bump => {
            let region = match init.support {
                Support::Domain => cfg.grid.omega.to_region(cfg.grid.dimension, "grid.omega")?,
                Support::Refuge => cfg.grid.refuge.to_region(cfg.grid.dimension, "grid.refuge")?,
            };
            Field::from_fn(grid, |x| {
                region
                    .axes
                    .iter()
                    .zip(x)
                    .map(|(iv, &c)| {
                        let z = (2.0 * c - iv.lo - iv.hi) / iv.length();
                        (1.0 - z * z).max(0.0).sqrt()
                    })
                    .product()
            })
        }
        InitialKind::Distance => distance_profile(grid, &mask, op.params().s)?,
        InitialKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            let interior = grid.interior_mask();
            let values = (0..grid.node_count())
                .map(|i| {
                    let v = rng.gen_range(0.0..1.0);
                    if interior.get(i) {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            Field::from_values(grid, values)?
        }
        InitialKind::RefugeEigen => unit_max(&first_eigen(op, grid.refuge_mask(), &eigen_opts)?.eigenfield),
        InitialKind::DomainEigen => unit_max(&first_eigen(op, op.active_mask(), &eigen_opts)?.eigenfield),
        InitialKind::RefugeNehari | InitialKind::DomainNehari => {
            let target = if init.kind == InitialKind::RefugeNehari {
                grid.refuge_mask().and(op.active_mask())
            } else {
                op.active_mask().clone()
            };
            let phi = unit_max(&first_eigen(op, &target, &eigen_opts)?.eigenfield);
            let theta = theta_star(op, &target, pb.lambda(), pb.q(), &phi)
                .map_err(|e| Error::Config(format!("initial.kind: {e}")))?;
            phi.scaled(theta)
        }
        InitialKind::Steady => {
            let state = solve_steady(pb, None, &cfg.steady)?;
            if state.status != SteadyStatus::Positive {
                return Err(Error::Config(format!(
                    "initial.kind: no positive steady state at lambda = {}",
                    pb.lambda()
                )));
            }
            state.field
        }
        InitialKind::File => {
            let path = init.path.as_ref().expect("validated");
            read_field_csv(grid, path)?
        }
    };
    let restricted = profile.restricted(&mask).scaled(init.amplitude);
    if restricted.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Config("initial: datum must be nonnegative".into()));
    }
    Ok(restricted)
}

/// Runs `mode` with `cfg`, writing artifacts under `out`.
pub fn run(mode: Mode, cfg: &ExperimentConfig, out: &Path) -> RunOutcome {
    let start = Instant::now();
    let mut ctx = RunContext::new(out);
    let result = fs::create_dir_all(out).map_err(Error::from).and_then(|_| {
        if let Some(m) = cfg.mode {
            if m != mode {
                return Err(Error::Config(format!(
                    "mode: configuration says `{m}` but `{mode}` was requested"
                )));
            }
        }
        execute(mode, cfg, &mut ctx)
    });
    let (status, error) = match result {
        Ok(status) => (status, None),
        Err(e) => (ExitStatus::from_error(&e), Some(e.to_string())),
    };
    ctx.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let manifest = json!({
        "tool": "fraclogi",
        "version": env!("CARGO_PKG_VERSION"),
        "mode": mode,
        "seed": cfg.seed,
        "status": status,
        "exit_code": status.code(),
        "error": error,
        "config": cfg,
        "config_toml": cfg.to_toml_string(),
        "grid": ctx.grid,
        "grid_hash": ctx.grid.as_ref().map(|g| g.hash.clone()),
        "operator": ctx.operator,
        "problem": ctx.problem,
        "dependencies": {
            "nalgebra": "0.35",
            "rand_chacha": "0.3",
            "rayon": "1",
            "serde_json": "1",
            "toml": "0.9",
        },
        "threads": rayon::current_num_threads(),
        "wall_times": ctx.timings,
        "outputs": ctx.outputs,
    });
    let (status, error) = match write_json(&manifest, &out.join("manifest.json")) {
        Ok(()) => (status, error),
        Err(e) if error.is_none() => (ExitStatus::Io, Some(e.to_string())),
        Err(_) => (status, error),
    };
    RunOutcome {
        status,
        out_dir: out.to_path_buf(),
        report: ctx.report,
        error,
    }
}

fn execute(mode: Mode, cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<ExitStatus> {
    if mode == Mode::Verify {
        let report = ctx.time("verify", || run_verify(cfg))?;
        let passed = report["all_passed"].as_bool().unwrap_or(false);
        ctx.write_report(report)?;
        return Ok(if passed {
            ExitStatus::Success
        } else {
            ExitStatus::CheckFailed
        });
    }
    let pb = build_problem_timed(cfg, Some(ctx))?;
    ctx.grid = Some(pb.op().grid().metadata());
    ctx.operator = Some(pb.op().metadata());
    ctx.problem = Some(json!({
        "metadata": pb.metadata(),
        "p": pb.p(),
        "b0": cfg.problem.b0,
        "lambda_input": cfg.problem.lambda,
    }));
    match mode {
        Mode::Eigen => run_eigen(cfg, &pb, ctx),
        Mode::Steady => run_steady(cfg, &pb, ctx),
        Mode::Sweep => run_sweep(cfg, &pb, ctx),
        Mode::Evolve => run_evolve(cfg, &pb, ctx),
        Mode::Classify => run_classify(cfg, &pb, ctx),
        Mode::Verify => unreachable!("handled above"),
    }
}

fn eigen_summary(r: &EigenResult, field: &str) -> Value {
    json!({
        "lambda": r.lambda,
        "iterations": r.iterations,
        "residual": r.residual,
        "mu": r.mu,
        "field": field,
    })
}

fn run_eigen(cfg: &ExperimentConfig, pb: &Problem, ctx: &mut RunContext) -> Result<ExitStatus> {
    let op = pb.op();
    let grid = op.grid();
    let opts = cfg.eigen.options();
    let domain = ctx.time("eigen", || first_eigen(op, op.active_mask(), &opts))?;
    ctx.write_field("fields/eigen_domain.csv", &domain.eigenfield)?;
    let refuge_mask = grid.refuge_mask().and(op.active_mask());
    let refuge = ctx.time("eigen", || first_eigen(op, &refuge_mask, &opts))?;
    ctx.write_field("fields/eigen_refuge.csv", &refuge.eigenfield)?;
    let mut weighted = Vec::new();
    for (k, &mu) in cfg.eigen.mu.iter().enumerate() {
        let r = ctx.time("weighted_eigen", || weighted_eigen(op, pb.absorption(), mu, &opts))?;
        let path = format!("fields/eigen_weighted_{k}.csv");
        ctx.write_field(&path, &r.eigenfield)?;
        let p = pb.p();
        let b_integral: f64 = r
            .eigenfield
            .values()
            .iter()
            .zip(pb.absorption().values())
            .map(|(psi, b)| b * psi.abs().powf(p))
            .sum::<f64>()
            * grid.cell_volume();
        let mut entry = eigen_summary(&r, &path);
        entry["b_integral"] = json!(b_integral);
        weighted.push(entry);
    }
    let mut report = eigen_summary(&domain, "fields/eigen_domain.csv");
    report["refuge"] = eigen_summary(&refuge, "fields/eigen_refuge.csv");
    report["weighted"] = Value::Array(weighted);
    ctx.write_report(report)?;
    Ok(ExitStatus::Success)
}

fn range_summary(pb: &Problem) -> Result<Value> {
    let range = lambda_range(pb)?;
    Ok(json!({
        "q_class": range.q_class,
        "lower": range.lower,
        "upper": range.upper,
        "guard": range.guard(),
        "contains_lambda": range.contains(pb.lambda()),
    }))
}

fn run_steady(cfg: &ExperimentConfig, pb: &Problem, ctx: &mut RunContext) -> Result<ExitStatus> {
    let range = ctx.time("thresholds", || range_summary(pb))?;
    let state = ctx.time("solve", || solve_steady(pb, None, &cfg.steady))?;
    ctx.write_field("fields/steady.csv", &state.field)?;
    let active = pb.op().active_mask();
    let report = json!({
        "status": state.status,
        "lambda": pb.lambda(),
        "lambda_range": range,
        "residual": state.residual,
        "linf": state.field.linf(),
        "l2": state.field.lm_norm_on(2.0, active),
        "J": state.energy_j,
        "iterations": state.iterations,
        "min_refuge": state.field.min_on(&pb.op().grid().refuge_mask().and(active)),
        "field": "fields/steady.csv",
    });
    ctx.write_report(report)?;
    Ok(ExitStatus::Success)
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn run_sweep(cfg: &ExperimentConfig, pb: &Problem, ctx: &mut RunContext) -> Result<ExitStatus> {
    if cfg.problem.lambdas.is_empty() {
        return Err(Error::Config("problem.lambdas: required for sweep mode".into()));
    }
    let lambdas = cfg
        .problem
        .lambdas
        .iter()
        .map(|l| l.resolve(pb))
        .collect::<Result<Vec<f64>>>()?;
    let grid = pb.op().grid();
    let masks = cfg
        .sweep
        .masks
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let region = m.to_region(cfg.grid.dimension, &format!("sweep.masks[{k}]"))?;
            let mask = grid.mask_in_box(&region).and(pb.op().active_mask());
            if mask.count() == 0 {
                return Err(Error::Config(format!("sweep.masks[{k}]: contains no active node")));
            }
            Ok(mask)
        })
        .collect::<Result<Vec<NodeMask>>>()?;
    let range = range_summary(pb)?;
    let table = ctx.time("sweep", || lambda_sweep(pb, &lambdas, &masks, &cfg.steady))?;
    ctx.write_text("series.csv", &table.to_csv(&lambdas, masks.len()))?;
    let linf: Vec<f64> = table.rows.iter().map(|r| r.linf).collect();
    let mask_summaries: Vec<Value> = (0..masks.len())
        .map(|k| {
            let mins: Vec<f64> = table.rows.iter().map(|r| r.mins[k]).collect();
            let growth = match (mins.first(), mins.last()) {
                (Some(&a), Some(&b)) if a > 0.0 => b / a,
                _ => f64::NAN,
            };
            json!({
                "nodes": masks[k].count(),
                "strictly_increasing": strictly_increasing(&mins),
                "strictly_decreasing": mins.windows(2).all(|w| w[1] < w[0]),
                "growth": growth,
            })
        })
        .collect();
    let report = json!({
        "lambdas": lambdas,
        "lambda_range": range,
        "rows": table.rows,
        "failures": table.failures,
        "linf_strictly_increasing": strictly_increasing(&linf),
        "linf_strictly_decreasing": linf.windows(2).all(|w| w[1] < w[0]),
        "terminal_linf": linf.last(),
        "max_residual": table.rows.iter().map(|r| r.residual).fold(0.0f64, f64::max),
        "masks": mask_summaries,
    });
    let failed = !table.failures.is_empty();
    ctx.write_report(report)?;
    Ok(if failed {
        ExitStatus::Solver
    } else {
        ExitStatus::Success
    })
}

fn series_summary(series: &[SeriesRow]) -> Value {
    let l2r: Vec<f64> = series.iter().map(|r| r.l2_refuge).collect();
    let excess = series
        .iter()
        .map(|r| r.linf - r.linf_bound)
        .fold(f64::NEG_INFINITY, f64::max);
    json!({
        "steps": series.len().saturating_sub(1),
        "final_time": series.last().map(|r| r.t),
        "linf_initial": series.first().map(|r| r.linf),
        "linf_final": series.last().map(|r| r.linf),
        "l2_refuge_initial": l2r.first(),
        "l2_refuge_final": l2r.last(),
        "l2_refuge_strictly_increasing": strictly_increasing(&l2r),
        "linf_bound_max_excess": excess,
        "linf_bound_holds": excess <= 1e-10,
    })
}

fn snapshot_paths(traj: &Trajectory, ctx: &mut RunContext) -> Result<Vec<Value>> {
    let mut paths = Vec::new();
    for (k, (t, field)) in traj.snapshots.iter().enumerate() {
        let rel = format!("fields/snapshot_{k:05}.csv");
        ctx.write_field(&rel, field)?;
        paths.push(json!({ "t": t, "field": rel }));
    }
    ctx.write_field("fields/final.csv", &traj.final_field)?;
    Ok(paths)
}

fn homogeneous_or_sub(pb: &Problem) -> bool {
    matches!(pb.q_class(), QClass::Subhomogeneous | QClass::Homogeneous)
}

fn run_evolve(cfg: &ExperimentConfig, pb: &Problem, ctx: &mut RunContext) -> Result<ExitStatus> {
    let u0 = ctx.time("initial", || initial_datum(cfg, pb))?;
    let scheme = cfg.scheme();
    let mut steady_note = Value::Null;
    let mut steady = None;
    if cfg.evolve.compare_steady && homogeneous_or_sub(pb) {
        let range = lambda_range(pb)?;
        if range.contains(pb.lambda()) {
            match ctx.time("steady", || solve_steady(pb, None, &cfg.steady)) {
                Ok(state) if state.status == SteadyStatus::Positive => {
                    ctx.write_field("fields/steady.csv", &state.field)?;
                    steady_note = json!({ "residual": state.residual, "field": "fields/steady.csv" });
                    steady = Some(state.field);
                }
                Ok(_) => steady_note = json!({ "error": "no positive steady state" }),
                Err(e) => steady_note = json!({ "error": e.to_string() }),
            }
        }
    }
    let well = if cfg.evolve.track_well && pb.q_class() == QClass::Superlinear {
        let op = pb.op();
        let refuge = op.grid().refuge_mask().and(op.active_mask());
        Some(ctx.time("well", || {
            mountain_level(op, &refuge, pb.lambda(), pb.q(), &cfg.eigen.options())
        })?)
    } else {
        None
    };
    let traj = match ctx.time("evolve", || evolve(pb, &u0, &scheme)) {
        Ok(t) => t,
        Err(failure) => {
            let partial = failure.partial;
            ctx.write_text("series.csv", &partial.series_csv())?;
            let snapshots = snapshot_paths(&partial, ctx)?;
            ctx.write_report(json!({
                "error": failure.error.to_string(),
                "partial": true,
                "series": series_summary(&partial.series),
                "snapshots": snapshots,
                "dt_history": partial.dt_history,
                "R_events": partial.truncation_events,
            }))?;
            return Err(failure.error);
        }
    };
    ctx.write_text("series.csv", &traj.series_csv())?;
    let snapshots = snapshot_paths(&traj, ctx)?;
    let verdict = classify_trajectory(&traj, pb, steady.as_ref())?;
    let audit = energy_audit(&traj);
    let well_report = well.map(|level| {
        let exit = traj
            .series
            .iter()
            .position(|r| !(r.energy_refuge < level.m && r.nehari_refuge < 0.0));
        json!({
            "m": level.m,
            "s0": level.s0,
            "unstable_invariant": exit.is_none(),
            "first_exit_step": exit,
        })
    });
    let report = json!({
        "classification": verdict.classification,
        "scheme_classification": traj.classification,
        "t_max_estimate": verdict.t_max_estimate,
        "R_events": traj.truncation_events,
        "dt_history": traj.dt_history,
        "horizon": horizon_json(&traj.horizon),
        "horizon_override": traj.horizon_override,
        "trajectory": verdict,
        "energy_audit": audit,
        "series": series_summary(&traj.series),
        "steady": steady_note,
        "well": well_report,
        "snapshots": snapshots,
    });
    let inconclusive = verdict.classification == Classification::Running;
    ctx.write_report(report)?;
    Ok(if inconclusive {
        ExitStatus::Inconclusive
    } else {
        ExitStatus::Success
    })
}

fn horizon_json(h: &Horizon) -> Value {
    json!({
        "t_star": if h.t_star.is_finite() { json!(h.t_star) } else { json!("inf") },
        "truncation": h.truncation,
    })
}

/// Parses a `series.csv` written by `evolve`.
pub fn read_series_csv(path: &Path) -> Result<Vec<SeriesRow>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| parse_err("empty file".into()))?
        .split(',')
        .collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| parse_err(format!("missing column `{name}`")))
    };
    let names = [
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
    let idx = names.iter().map(|n| column(n)).collect::<Result<Vec<usize>>>()?;
    let mut rows: Vec<SeriesRow> = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(parse_err(format!("line {}: expected {} cells", k + 2, header.len())));
        }
        let v = idx
            .iter()
            .map(|&i| {
                cells[i]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("line {}: {e}", k + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(SeriesRow {
            t: v[0],
            linf: v[1],
            l2_omega: v[2],
            l2_refuge: v[3],
            energy: v[4],
            energy_refuge: v[5],
            nehari_refuge: v[6],
            defect: v[7],
            step_increment_l2: v[8],
            dt: v[9],
            truncation: v[10],
            truncation_active: false,
            linf_bound: f64::INFINITY,
        });
    }
    if rows.is_empty() {
        return Err(parse_err("no rows".into()));
    }
    Ok(rows)
}

fn run_classify(cfg: &ExperimentConfig, pb: &Problem, ctx: &mut RunContext) -> Result<ExitStatus> {
    if let Some(path) = &cfg.classify.trajectory {
        return classify_series(cfg, pb, path, ctx);
    }
    if pb.q_class() != QClass::Superlinear {
        return Err(Error::Config(format!(
            "problem.q: classifying initial data requires q > p - 1 = {}",
            pb.p() - 1.0
        )));
    }
    let u0 = ctx.time("initial", || initial_datum(cfg, pb))?;
    ctx.write_field("fields/initial.csv", &u0)?;
    let report = ctx.time("classify", || WellContext::new(pb).and_then(|w| w.classify(&u0)))?;
    let witness = match &report.witness {
        Some(w) => {
            ctx.write_field("fields/witness.csv", w)?;
            json!("fields/witness.csv")
        }
        None => Value::Null,
    };
    let inconclusive = report.membership == Membership::NoneEstablished;
    ctx.write_report(json!({
        "membership": report.membership,
        "energy": report.energy,
        "nehari": report.nehari,
        "theta_star": report.theta_star,
        "m": report.m,
        "s0": report.s0,
        "m_domain": report.m_domain,
        "witness": witness,
        "initial": "fields/initial.csv",
    }))?;
    Ok(if inconclusive {
        ExitStatus::Inconclusive
    } else {
        ExitStatus::Success
    })
}

fn classify_series(cfg: &ExperimentConfig, pb: &Problem, path: &Path, ctx: &mut RunContext) -> Result<ExitStatus> {
    let series = read_series_csv(path)?;
    let grid = pb.op().grid();
    let final_field = match &cfg.classify.final_field {
        Some(p) => read_field_csv(grid, p)?,
        None => Field::zeros(grid),
    };
    let scheme = cfg.scheme();
    let last = series.last().expect("nonempty").linf;
    let classification = if last >= scheme.blowup_cap {
        if pb.q() > 1.0 {
            Classification::BlowupSuspected
        } else {
            Classification::BlowupInfinite
        }
    } else if last < scheme.extinction_tolerance {
        Classification::Extinct
    } else {
        Classification::HorizonReached
    };
    let mut steady = None;
    if cfg.classify.final_field.is_some() && cfg.evolve.compare_steady && homogeneous_or_sub(pb) {
        let range = lambda_range(pb)?;
        if range.contains(pb.lambda()) {
            let state = ctx.time("steady", || solve_steady(pb, None, &cfg.steady))?;
            if state.status == SteadyStatus::Positive {
                steady = Some(state.field);
            }
        }
    }
    let traj = Trajectory {
        series,
        snapshots: Vec::new(),
        final_field,
        classification,
        t_max_estimate: None,
        fit: None,
        truncation_events: Vec::new(),
        dt_history: Vec::new(),
        horizon: Horizon {
            t_star: f64::INFINITY,
            truncation: None,
        },
        horizon_override: false,
    };
    let verdict = classify_trajectory(&traj, pb, steady.as_ref())?;
    let inconclusive = verdict.classification == Classification::Running;
    ctx.write_report(json!({
        "source": path,
        "classification": verdict.classification,
        "t_max_estimate": verdict.t_max_estimate,
        "trajectory": verdict,
    }))?;
    Ok(if inconclusive {
        ExitStatus::Inconclusive
    } else {
        ExitStatus::Success
    })
}
