//! Pre-configured experiments with their acceptance predicates.
//!
//! Each scenario runs one or more bundled configurations through [`run`],
//! each in its own subdirectory, then checks its predicate on the reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, Mode};
use super::runner::{run, ExitStatus, RunOutcome};
use crate::io::write_json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scenario {
    /// Convergence to the steady state, sublinear source.
    Stabilization,
    /// Unbounded growth for `q = p - 1` above the refuge eigenvalue.
    BlowupEigen,
    /// Finite-time blow-up from the unstable set and decay from the stable set.
    Sattinger,
    /// Steady states blowing up as λ approaches the refuge eigenvalue.
    SweepBlowup,
    /// Steady states vanishing as λ approaches the domain eigenvalue.
    Vanish,
    /// Superlinear branch growing as λ decreases to zero.
    #[value(name = "superlinear_lambda0")]
    #[serde(rename = "superlinear_lambda0")]
    SuperlinearLambda0,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Stabilization,
        Scenario::BlowupEigen,
        Scenario::Sattinger,
        Scenario::SweepBlowup,
        Scenario::Vanish,
        Scenario::SuperlinearLambda0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Stabilization => "stabilization",
            Scenario::BlowupEigen => "blowup_eigen",
            Scenario::Sattinger => "sattinger",
            Scenario::SweepBlowup => "sweep_blowup",
            Scenario::Vanish => "vanish",
            Scenario::SuperlinearLambda0 => "superlinear_lambda0",
        }
    }

    /// Bundled runs as `(run name, mode, configuration)`.
    pub fn runs(self) -> Vec<(&'static str, Mode, &'static str)> {
        match self {
            Scenario::Stabilization => vec![("evolve", Mode::Evolve, STABILIZATION)],
            Scenario::BlowupEigen => vec![("evolve", Mode::Evolve, BLOWUP_EIGEN)],
            Scenario::Sattinger => vec![
                ("unstable_classify", Mode::Classify, SATTINGER_UNSTABLE),
                ("unstable", Mode::Evolve, SATTINGER_UNSTABLE),
                ("unstable_restricted", Mode::Evolve, SATTINGER_RESTRICTED),
                ("stable_classify", Mode::Classify, SATTINGER_STABLE),
                ("stable", Mode::Evolve, SATTINGER_STABLE),
            ],
            Scenario::SweepBlowup => vec![("sweep", Mode::Sweep, SWEEP_BLOWUP)],
            Scenario::Vanish => vec![("sweep", Mode::Sweep, VANISH)],
            Scenario::SuperlinearLambda0 => vec![("sweep", Mode::Sweep, SUPERLINEAR_LAMBDA0)],
        }
    }
}

const STABILIZATION: &str = r#"
seed = 0

[problem]
q = 0.5
r = 2.0
b0 = 1.0
lambda = 1.0

[initial]
kind = "bump"
amplitude = 0.5

[scheme]
horizon = 50.0
"#;

const BLOWUP_EIGEN: &str = r#"
seed = 0

[problem]
q = 1.0
r = 2.0
b0 = 1.0
lambda = "1.5*lambda1_refuge"

[initial]
kind = "distance"
support = "refuge"
amplitude = 0.1

[scheme]
horizon = 5.0

[evolve]
compare_steady = false
"#;

const SATTINGER_UNSTABLE: &str = r#"
seed = 0

[problem]
q = 3.0
r = 2.0
b0 = 1.0
lambda = 1.0

[initial]
kind = "refuge_nehari"
amplitude = 2.0

[scheme]
horizon = 1.0
"#;

const SATTINGER_RESTRICTED: &str = r#"
seed = 0

[problem]
q = 3.0
r = 2.0
b0 = 1.0
lambda = 1.0
refuge_only = true

[initial]
kind = "refuge_nehari"
amplitude = 2.0

[scheme]
horizon = 1.0

[evolve]
track_well = true
"#;

const SATTINGER_STABLE: &str = r#"
seed = 0

[problem]
q = 3.0
r = 2.0
b0 = 1.0
lambda = 1.0

[initial]
kind = "domain_nehari"
amplitude = 0.5

[scheme]
horizon = 2.0
"#;

const SWEEP_BLOWUP: &str = r#"
seed = 0

[problem]
q = 1.0
r = 2.0
b0 = 10.0
lambdas = ["range(0.5)", "range(0.75)", "range(0.9)", "range(0.95)", "range(0.98)", "range(0.99)", "range(0.995)", "range(0.998)"]

[sweep]
masks = [[-0.2, 0.2], [0.6, 0.8]]
"#;

const VANISH: &str = r#"
seed = 0

[problem]
q = 1.0
r = 2.0
b0 = 10.0
lambdas = ["range(0.5)", "range(0.2)", "range(0.1)", "range(0.05)", "range(0.02)", "range(0.01)", "range(0.005)", "range(0.002)", "range(0.0012)"]

[sweep]
masks = [[-0.2, 0.2], [0.6, 0.8]]
"#;

const SUPERLINEAR_LAMBDA0: &str = r#"
seed = 0

[problem]
q = 3.0
r = 2.0
b0 = 1.0
lambdas = [1.0, 0.5, 0.25, 0.125]
"#;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: Value,
    pub expected: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub mode: Mode,
    pub dir: PathBuf,
    pub status: ExitStatus,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub runs: Vec<RunRecord>,
    /// Files backing the checks, relative to the scenario directory.
    pub evidence: Vec<String>,
}

impl ScenarioReport {
    /// Exit status of the scenario as a whole.
    pub fn status(&self) -> ExitStatus {
        if let Some(r) = self
            .runs
            .iter()
            .find(|r| matches!(r.status, ExitStatus::Io | ExitStatus::Validation | ExitStatus::Solver))
        {
            return r.status;
        }
        if self.passed {
            ExitStatus::Success
        } else {
            ExitStatus::CheckFailed
        }
    }
}

fn number(report: &Value, pointer: &str) -> Option<f64> {
    report.pointer(pointer).and_then(Value::as_f64)
}

fn text<'a>(report: &'a Value, pointer: &str) -> Option<&'a str> {
    report.pointer(pointer).and_then(Value::as_str)
}

struct Checker<'a> {
    outcomes: &'a [(&'static str, RunOutcome)],
    checks: Vec<Check>,
}

impl<'a> Checker<'a> {
    fn report(&self, run: &str) -> &'a Value {
        &self
            .outcomes
            .iter()
            .find(|(name, _)| *name == run)
            .expect("scenario run exists")
            .1
            .report
    }

    fn push(&mut self, name: String, value: Value, expected: String, passed: bool) {
        self.checks.push(Check {
            name,
            value,
            expected,
            passed,
        });
    }

    fn below(&mut self, run: &str, pointer: &str, limit: f64) {
        let v = number(self.report(run), pointer);
        self.push(
            format!("{run}{pointer}"),
            json!(v),
            format!("< {limit:e}"),
            v.is_some_and(|x| x < limit),
        );
    }

    fn above(&mut self, run: &str, pointer: &str, limit: f64) {
        let v = number(self.report(run), pointer);
        self.push(
            format!("{run}{pointer}"),
            json!(v),
            format!("> {limit:e}"),
            v.is_some_and(|x| x > limit),
        );
    }

    fn equals(&mut self, run: &str, pointer: &str, expected: Value) {
        let v = self.report(run).pointer(pointer).cloned().unwrap_or(Value::Null);
        let passed = v == expected;
        self.push(format!("{run}{pointer}"), v, format!("== {expected}"), passed);
    }

    fn one_of(&mut self, run: &str, pointer: &str, allowed: &[&str]) {
        let v = text(self.report(run), pointer).map(str::to_string);
        let passed = v.as_deref().is_some_and(|s| allowed.contains(&s));
        self.push(format!("{run}{pointer}"), json!(v), format!("in {allowed:?}"), passed);
    }

    fn ratio_below(&mut self, run: &str, num: &str, den: &str, limit: f64) {
        let r = self.report(run);
        let v = number(r, num).zip(number(r, den)).map(|(a, b)| a / b);
        self.push(
            format!("{run}{num} / {den}"),
            json!(v),
            format!("< {limit:e}"),
            v.is_some_and(|x| x < limit),
        );
    }

    fn no_failures(&mut self, run: &str) {
        let n = self
            .report(run)
            .pointer("/failures")
            .and_then(Value::as_array)
            .map(Vec::len);
        self.push(format!("{run}/failures"), json!(n), "== 0".into(), n == Some(0));
    }
}

fn predicates(scenario: Scenario, c: &mut Checker<'_>) {
    match scenario {
        Scenario::Stabilization => {
            c.below("evolve", "/trajectory/terminal_distance", 1e-3);
            c.equals("evolve", "/classification", json!("stabilized"));
        }
        Scenario::BlowupEigen => {
            c.equals("evolve", "/series/l2_refuge_strictly_increasing", json!(true));
            let r = c.report("evolve");
            let growth = number(r, "/series/l2_refuge_final")
                .zip(number(r, "/series/l2_refuge_initial"))
                .map(|(a, b)| a / b);
            c.push(
                "evolve/series/l2_refuge_final / l2_refuge_initial".into(),
                json!(growth),
                "> 1e1".into(),
                growth.is_some_and(|g| g > 10.0),
            );
            c.equals("evolve", "/classification", json!("blowup_infinite"));
        }
        Scenario::Sattinger => {
            c.one_of("unstable_classify", "/membership", &["in_h", "in_hu"]);
            c.equals("unstable", "/classification", json!("blowup_finite"));
            c.above("unstable", "/trajectory/blowup_fit/r_squared", 0.95);
            c.equals("unstable_restricted", "/well/unstable_invariant", json!(true));
            c.equals("stable_classify", "/membership", json!("in_hs"));
            c.ratio_below("stable", "/series/linf_final", "/series/linf_initial", 1e-2);
        }
        Scenario::SweepBlowup => {
            c.no_failures("sweep");
            for k in 0..2 {
                c.equals("sweep", &format!("/masks/{k}/strictly_increasing"), json!(true));
                c.above("sweep", &format!("/masks/{k}/growth"), 5.0);
            }
        }
        Scenario::Vanish => {
            c.no_failures("sweep");
            c.equals("sweep", "/linf_strictly_decreasing", json!(true));
            c.below("sweep", "/terminal_linf", 1e-2);
        }
        Scenario::SuperlinearLambda0 => {
            c.no_failures("sweep");
            c.equals("sweep", "/linf_strictly_increasing", json!(true));
            c.below("sweep", "/max_residual", 1e-5);
        }
    }
}

/// Runs `scenario` under `out/<name>`, running its configurations
/// concurrently, and writes `scenario.json` there.
pub fn run_scenario(scenario: Scenario, out: &Path) -> ScenarioReport {
    let dir = out.join(scenario.name());
    let outcomes: Vec<(&'static str, RunOutcome)> = scenario
        .runs()
        .into_par_iter()
        .map(|(name, mode, text)| {
            let run_dir = dir.join(name);
            let cfg = ExperimentConfig::from_toml_str(text).expect("bundled configuration is valid");
            (name, run(mode, &cfg, &run_dir))
        })
        .collect();
    let mut checker = Checker {
        outcomes: &outcomes,
        checks: Vec::new(),
    };
    predicates(scenario, &mut checker);
    let checks = checker.checks;
    let runs: Vec<RunRecord> = scenario
        .runs()
        .iter()
        .zip(&outcomes)
        .map(|((name, mode, _), (_, o))| RunRecord {
            name: name.to_string(),
            mode: *mode,
            dir: PathBuf::from(name),
            status: o.status,
            error: o.error.clone(),
        })
        .collect();
    let evidence = runs
        .iter()
        .flat_map(|r| {
            let mut files = vec![format!("{}/report.json", r.name), format!("{}/manifest.json", r.name)];
            if matches!(r.mode, Mode::Evolve | Mode::Sweep) {
                files.push(format!("{}/series.csv", r.name));
            }
            files
        })
        .collect();
    let mut report = ScenarioReport {
        scenario,
        passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
        checks,
        runs,
        evidence,
    };
    if let Err(e) = write_json(&report, &dir.join("scenario.json")) {
        report.passed = false;
        report.checks.push(Check {
            name: "scenario.json".into(),
            value: json!(e.to_string()),
            expected: "written".into(),
            passed: false,
        });
    }
    report
}
