//! Experiment configuration: strict TOML with nested sections.
//!
//! Every section has defaults, and the manifest echoes the fully resolved
//! configuration, so a run is reproducible from its manifest alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eigen::EigenOptions;
use crate::elliptic::{lambda_range, Problem, SteadyOptions};
use crate::error::{Error, Result};
use crate::grid::{BoxRegion, DomainSpec, Interval};
use crate::nonlocal_op::OperatorParams;
use crate::parabolic::SchemeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Eigen,
    Steady,
    Sweep,
    Evolve,
    Classify,
    Verify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Eigen => "eigen",
            Mode::Steady => "steady",
            Mode::Sweep => "sweep",
            Mode::Evolve => "evolve",
            Mode::Classify => "classify",
            Mode::Verify => "verify",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A box given either as one `[lo, hi]` pair used on every axis or as one
/// pair per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxInput {
    Uniform([f64; 2]),
    PerAxis(Vec<[f64; 2]>),
}

impl BoxInput {
    pub fn to_region(&self, dimension: usize, key: &str) -> Result<BoxRegion> {
        let axes: Vec<[f64; 2]> = match self {
            BoxInput::Uniform(pair) => vec![*pair; dimension],
            BoxInput::PerAxis(pairs) => pairs.clone(),
        };
        if axes.len() != dimension {
            return Err(Error::Config(format!(
                "{key}: expected {dimension} intervals, got {}",
                axes.len()
            )));
        }
        for [lo, hi] in &axes {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "{key}: interval [{lo}, {hi}] is empty or not finite"
                )));
            }
        }
        Ok(BoxRegion::new(
            axes.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub dimension: usize,
    pub omega: BoxInput,
    pub refuge: BoxInput,
    pub holes: Vec<BoxInput>,
    pub nodes_per_axis: usize,
    pub collar: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            dimension: 1,
            omega: BoxInput::Uniform([-1.0, 1.0]),
            refuge: BoxInput::Uniform([-0.4, 0.4]),
            holes: Vec::new(),
            nodes_per_axis: 201,
            collar: 0,
        }
    }
}

impl GridSection {
    pub fn domain_spec(&self) -> Result<DomainSpec> {
        if !(1..=2).contains(&self.dimension) {
            return Err(Error::Config(format!(
                "grid.dimension: must be 1 or 2, got {}",
                self.dimension
            )));
        }
        let d = self.dimension;
        Ok(DomainSpec {
            dimension: d,
            omega: self.omega.to_region(d, "grid.omega")?,
            holes: self
                .holes
                .iter()
                .enumerate()
                .map(|(k, h)| h.to_region(d, &format!("grid.holes[{k}]")))
                .collect::<Result<_>>()?,
            refuge: self.refuge.to_region(d, "grid.refuge")?,
            nodes_per_axis: self.nodes_per_axis,
            collar: self.collar,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    pub s: f64,
    pub p: f64,
    /// Blocked parallel apply; results do not depend on the thread count.
    pub parallel: bool,
    /// Directory for assembled weight caches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for OperatorSection {
    fn default() -> Self {
        OperatorSection {
            s: 0.5,
            p: 2.0,
            parallel: false,
            cache_dir: None,
        }
    }
}

/// A reference eigenvalue used in λ expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaBase {
    /// `λ₁(Ω)`.
    Domain,
    /// `λ₁(Ω₀)`.
    Refuge,
    /// `λ₁(Ω) + f (λ₁(Ω₀) - λ₁(Ω))`.
    Range,
}

/// λ given as a number or as an expression: `"<f>*lambda1_domain"`,
/// `"<f>*lambda1_refuge"` or `"range(<f>)"`.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaInput {
    Value(f64),
    Relative { factor: f64, base: LambdaBase },
}

impl LambdaInput {
    pub fn is_relative(&self) -> bool {
        matches!(self, LambdaInput::Relative { .. })
    }

    /// Resolves against the thresholds of `pb`.
    pub fn resolve(&self, pb: &Problem) -> Result<f64> {
        match *self {
            LambdaInput::Value(v) => Ok(v),
            LambdaInput::Relative { factor, base } => {
                let t = pb.thresholds()?;
                Ok(match base {
                    LambdaBase::Domain => factor * t.domain.lambda,
                    LambdaBase::Refuge => factor * t.refuge.lambda,
                    LambdaBase::Range => {
                        let range = lambda_range(pb)?;
                        let upper = range.upper.unwrap_or(t.refuge.lambda);
                        t.domain.lambda + factor * (upper - t.domain.lambda)
                    }
                })
            }
        }
    }
}

impl FromStr for LambdaInput {
    type Err = String;

    fn from_str(text: &str) -> std::result::Result<Self, String> {
        let text = text.trim();
        let number = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
        if let Some(inner) = text.strip_prefix("range(").and_then(|t| t.strip_suffix(')')) {
            return Ok(LambdaInput::Relative {
                factor: number(inner)?,
                base: LambdaBase::Range,
            });
        }
        let (factor, symbol) = match text.split_once('*') {
            Some((f, s)) => (number(f)?, s.trim()),
            None => (1.0, text),
        };
        let base = match symbol {
            "lambda1_domain" => LambdaBase::Domain,
            "lambda1_refuge" => LambdaBase::Refuge,
            _ => match text.parse::<f64>() {
                Ok(v) => return Ok(LambdaInput::Value(v)),
                Err(_) => {
                    return Err(format!(
                        "`{text}`: expected a number, `<f>*lambda1_domain`, `<f>*lambda1_refuge` or `range(<f>)`"
                    ))
                }
            },
        };
        Ok(LambdaInput::Relative { factor, base })
    }
}

impl fmt::Display for LambdaInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaInput::Value(v) => write!(f, "{v:?}"),
            LambdaInput::Relative { factor, base } => match base {
                LambdaBase::Domain => write!(f, "{factor:?}*lambda1_domain"),
                LambdaBase::Refuge => write!(f, "{factor:?}*lambda1_refuge"),
                LambdaBase::Range => write!(f, "range({factor:?})"),
            },
        }
    }
}

impl Serialize for LambdaInput {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaInput::Value(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaInput {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(LambdaInput::Value(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub q: f64,
    pub r: f64,
    pub b0: f64,
    pub lambda: LambdaInput,
    /// λ list for sweeps, solved in the given order.
    pub lambdas: Vec<LambdaInput>,
    /// The restricted problem: refuge mask only, absorption disabled.
    pub refuge_only: bool,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            q: 0.5,
            r: 2.0,
            b0: 1.0,
            lambda: LambdaInput::Value(1.0),
            lambdas: Vec::new(),
            refuge_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub diagonal_scaling: bool,
    /// Weights of the additional weighted problems `L ψ + μ b Φ_p(ψ) = λ Φ_p(ψ)`.
    pub mu: Vec<f64>,
}

impl Default for EigenSection {
    fn default() -> Self {
        let o = EigenOptions::default();
        EigenSection {
            tolerance: o.tolerance,
            max_iterations: o.max_iterations,
            diagonal_scaling: o.diagonal_scaling,
            mu: Vec::new(),
        }
    }
}

impl EigenSection {
    pub fn options(&self) -> EigenOptions {
        EigenOptions {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            diagonal_scaling: self.diagonal_scaling,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    Zero,
    /// `Π_k sqrt(1 - ((x_k - c_k)/r_k)²)` over the support box.
    Bump,
    /// `d(x, M^c)^s` for the support mask `M`.
    Distance,
    /// Uniform random values on the support, from the config seed.
    Random,
    /// Unit max-norm first eigenfield of Ω₀.
    RefugeEigen,
    /// Unit max-norm first eigenfield of Ω.
    DomainEigen,
    /// `θ* φ₀` with `θ*` the Nehari multiple on Ω₀.
    RefugeNehari,
    /// `θ*_Ω φ_Ω` with `θ*_Ω` the Nehari multiple on Ω.
    DomainNehari,
    /// The steady state `u_λ`.
    Steady,
    /// A field CSV read from `path`.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Domain,
    Refuge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub kind: InitialKind,
    /// Multiplies the chosen profile.
    pub amplitude: f64,
    pub support: Support,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection {
            kind: InitialKind::Bump,
            amplitude: 1.0,
            support: Support::Domain,
            path: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Compact boxes `K_k` whose minima are tabulated.
    pub masks: Vec<BoxInput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveSection {
    /// Solve for `u_λ` and report the terminal distance to it.
    pub compare_steady: bool,
    /// Compute the mountain level of Ω₀ and check at every recorded step
    /// that the run stays in the unstable set (`q > p - 1` only).
    pub track_well: bool,
}

impl Default for EvolveSection {
    fn default() -> Self {
        EvolveSection {
            compare_steady: true,
            track_well: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub exponents: Vec<f64>,
    pub homogeneity_samples: usize,
    /// Nodes per axis of the finite-difference gradient grids.
    pub gradient_nodes: usize,
    pub inequality_samples: usize,
    pub accretivity_pairs: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            exponents: vec![1.5, 2.0, 3.0],
            homogeneity_samples: 100,
            gradient_nodes: 17,
            inequality_samples: 100_000,
            accretivity_pairs: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    /// A `series.csv` written by `evolve`; when set the trajectory is
    /// classified instead of the initial datum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<PathBuf>,
    /// Terminal field of that trajectory, for the distance to `u_λ`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_field: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Overrides `scheme.snapshot_stride` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub operator: OperatorSection,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub eigen: EigenSection,
    #[serde(default)]
    pub steady: SteadyOptions,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub evolve: EvolveSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub classify: ClassifySection,
}

fn section_error(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("[{section}] {other}")),
    }
}

fn positive(key: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: must be positive and finite, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Scheme settings with the top-level snapshot stride applied.
    pub fn scheme(&self) -> SchemeConfig {
        let mut scheme = self.scheme.clone();
        if let Some(stride) = self.snapshot_stride {
            scheme.snapshot_stride = stride;
        }
        scheme
    }

    /// Re-runs the parameter checks of every downstream module.
    pub fn validate(&self) -> Result<()> {
        let spec = self.grid.domain_spec()?;
        crate::grid::Grid::new(&spec).map_err(|e| section_error("grid", e))?;
        OperatorParams::new(self.operator.s, self.operator.p).map_err(|e| section_error("operator", e))?;
        let pr = &self.problem;
        positive("problem.q", pr.q)?;
        positive("problem.r", pr.r)?;
        positive("problem.b0", pr.b0)?;
        if !(pr.r > self.operator.p - 1.0) {
            return Err(Error::Config(format!(
                "problem.r: must exceed p - 1 = {}, got {}",
                self.operator.p - 1.0,
                pr.r
            )));
        }
        let check_lambda = |key: &str, l: &LambdaInput| match l {
            LambdaInput::Value(v) => positive(key, *v),
            LambdaInput::Relative { factor, base } => {
                if *base == LambdaBase::Range {
                    if !(factor.is_finite() && *factor > 0.0 && *factor < 1.0) {
                        return Err(Error::Config(format!(
                            "{key}: range fraction must lie in (0, 1), got {factor}"
                        )));
                    }
                    if (pr.q - (self.operator.p - 1.0)).abs() > 1e-12 {
                        return Err(Error::Config(format!("{key}: `range(..)` requires q = p - 1")));
                    }
                    Ok(())
                } else {
                    positive(key, *factor)
                }
            }
        };
        check_lambda("problem.lambda", &pr.lambda)?;
        for (k, l) in pr.lambdas.iter().enumerate() {
            check_lambda(&format!("problem.lambdas[{k}]"), l)?;
        }
        positive("eigen.tolerance", self.eigen.tolerance)?;
        if self.eigen.max_iterations == 0 {
            return Err(Error::Config("eigen.max_iterations: must be positive".into()));
        }
        for (k, mu) in self.eigen.mu.iter().enumerate() {
            positive(&format!("eigen.mu[{k}]"), *mu)?;
        }
        positive("steady.tolerance", self.steady.tolerance)?;
        positive("steady.divergence_cap", self.steady.divergence_cap)?;
        if self.steady.max_iterations == 0 {
            return Err(Error::Config("steady.max_iterations: must be positive".into()));
        }
        self.scheme().validate().map_err(|e| section_error("scheme", e))?;
        let init = &self.initial;
        if !(init.amplitude >= 0.0 && init.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "initial.amplitude: must be nonnegative and finite, got {}",
                init.amplitude
            )));
        }
        if init.kind == InitialKind::File && init.path.is_none() {
            return Err(Error::Config(
                "initial.path: required when initial.kind = \"file\"".into(),
            ));
        }
        for (k, m) in self.sweep.masks.iter().enumerate() {
            m.to_region(self.grid.dimension, &format!("sweep.masks[{k}]"))?;
        }
        let v = &self.verify;
        for (k, p) in v.exponents.iter().enumerate() {
            OperatorParams::new(0.5, *p).map_err(|e| Error::Config(format!("verify.exponents[{k}]: {e}")))?;
        }
        if v.gradient_nodes < 5 || v.gradient_nodes > 25 {
            return Err(Error::Config(format!(
                "verify.gradient_nodes: must lie in [5, 25], got {}",
                v.gradient_nodes
            )));
        }
        if self.classify.final_field.is_some() && self.classify.trajectory.is_none() {
            return Err(Error::Config(
                "classify.final_field: requires classify.trajectory".into(),
            ));
        }
        Ok(())
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.grid.domain_spec().unwrap(), DomainSpec::default_1d());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[grid]\nnodes = 5\n").unwrap_err();
        assert!(err.to_string().contains("nodes"), "{err}");
        assert!(ExperimentConfig::from_toml_str("colour = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[scheme]\ndtt = 0.1\n").is_err());
    }

    #[test]
    fn downstream_constraints_are_checked() {
        for (text, key) in [
            ("[operator]\ns = 1.5\n", "[operator]"),
            ("[operator]\np = 1.0\n", "[operator]"),
            ("[problem]\nr = 0.5\n", "problem.r"),
            ("[problem]\nlambda = -1.0\n", "problem.lambda"),
            ("[problem]\nlambda = \"range(0.5)\"\n", "problem.lambda"),
            ("[scheme]\ndt = 2.0\nhorizon = 1.0\n", "[scheme]"),
            ("[grid]\nomega = [1.0, -1.0]\n", "grid.omega"),
            ("[grid]\nrefuge = [-2.0, 0.0]\n", "[grid]"),
            ("[initial]\nkind = \"file\"\n", "initial.path"),
            ("[sweep]\nmasks = [[[0.0, 0.1], [0.0, 0.1]]]\n", "sweep.masks[0]"),
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
            assert!(err.contains(key), "{text}: {err}");
        }
    }

    #[test]
    fn lambda_expressions_parse_and_print() {
        for (text, expected) in [
            (
                "1.5*lambda1_refuge",
                LambdaInput::Relative {
                    factor: 1.5,
                    base: LambdaBase::Refuge,
                },
            ),
            (
                "lambda1_domain",
                LambdaInput::Relative {
                    factor: 1.0,
                    base: LambdaBase::Domain,
                },
            ),
            (
                "range(0.25)",
                LambdaInput::Relative {
                    factor: 0.25,
                    base: LambdaBase::Range,
                },
            ),
            ("2.5", LambdaInput::Value(2.5)),
        ] {
            let parsed: LambdaInput = text.parse().unwrap();
            assert_eq!(parsed, expected);
            assert_eq!(parsed.to_string().parse::<LambdaInput>().unwrap(), expected);
        }
        assert!("3*lambda2".parse::<LambdaInput>().is_err());
    }

    #[test]
    fn toml_echo_round_trips() {
        let text = r#"
mode = "evolve"
seed = 42
snapshot_stride = 10
[grid]
dimension = 2
omega = [[-1.0, 1.0], [-1.0, 1.0]]
refuge = [-0.4, 0.4]
nodes_per_axis = 33
[problem]
q = 1.0
lambda = "1.5*lambda1_refuge"
lambdas = [1.0, "range(0.5)"]
[sweep]
masks = [[-0.2, 0.2]]
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let echo = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&echo).unwrap(), cfg);
        assert_eq!(cfg.scheme().snapshot_stride, 10);
    }
}
