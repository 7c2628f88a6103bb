use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn fraclogi(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fraclogi"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL_GRID: &str = "[grid]\nnodes_per_axis = 61\n";

#[test]
fn eigen_mode_writes_lambda_and_eigenfield() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "mode = \"eigen\"\n");
    let (code, log) = fraclogi(&["eigen", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(code, 0, "{log}");
    let report = json(&dir.path().join("run/report.json"));
    assert!(report["lambda"].as_f64().unwrap() > 0.0);
    assert!(report["refuge"]["lambda"].as_f64().unwrap() > report["lambda"].as_f64().unwrap());
    let csv = fs::read_to_string(dir.path().join("run/fields/eigen_domain.csv")).unwrap();
    assert!(csv.starts_with("index,x,value\n"));
    assert_eq!(csv.lines().count(), 1 + 201);
    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["mode"], "eigen");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["grid_hash"], manifest["grid"]["hash"]);
    assert!(manifest["wall_times"]["total"].as_f64().unwrap() >= 0.0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "snapshot_stride = 20\n{SMALL_GRID}[problem]\nq = 0.5\n[initial]\nkind = \"random\"\n[scheme]\nhorizon = 0.5\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    // Exit 4: a half-unit horizon leaves the run unclassified.
    for out in ["a", "b"] {
        let (code, log) = fraclogi(&["evolve", "--config", &cfg, "--out", out, "--seed", "11"], dir.path());
        assert_eq!(code, 4, "{log}");
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        fs::read(a.join("series.csv")).unwrap(),
        fs::read(b.join("series.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
    let mut fields: Vec<_> = fs::read_dir(a.join("fields"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    fields.sort();
    assert!(fields.len() > 3);
    for f in fields {
        assert_eq!(
            fs::read(a.join("fields").join(&f)).unwrap(),
            fs::read(b.join("fields").join(&f)).unwrap()
        );
    }
    // A different seed changes the random datum.
    let (code, _) = fraclogi(&["evolve", "--config", &cfg, "--out", "c", "--seed", "12"], dir.path());
    assert_eq!(code, 4);
    assert_ne!(
        fs::read(a.join("series.csv")).unwrap(),
        fs::read(dir.path().join("c/series.csv")).unwrap()
    );
}

#[test]
fn manifest_config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL_GRID}[problem]\nq = 1.0\nlambdas = [\"range(0.5)\", \"range(0.8)\"]\n[sweep]\nmasks = [[-0.2, 0.2]]\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let (code, log) = fraclogi(&["sweep", "--config", &cfg, "--out", "first"], dir.path());
    assert_eq!(code, 0, "{log}");
    let manifest = json(&dir.path().join("first/manifest.json"));
    let echo = write(dir.path(), "echo.toml", manifest["config_toml"].as_str().unwrap());
    let (code, log) = fraclogi(&["sweep", "--config", &echo, "--out", "second"], dir.path());
    assert_eq!(code, 0, "{log}");
    for f in ["series.csv", "report.json"] {
        assert_eq!(
            fs::read(dir.path().join("first").join(f)).unwrap(),
            fs::read(dir.path().join("second").join(f)).unwrap(),
            "{f}"
        );
    }
    let header = fs::read_to_string(dir.path().join("first/series.csv")).unwrap();
    assert!(header.starts_with("lambda,residual,linf,l2,J,min_K1\n"));
}

#[test]
fn validation_failures_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("unknown.toml", "[grid]\nnodez = 3\n"),
        ("bad_s.toml", "[operator]\ns = 2.0\n"),
        ("mismatch.toml", "mode = \"steady\"\n"),
    ] {
        let cfg = write(dir.path(), name, text);
        let (code, log) = fraclogi(&["eigen", "--config", &cfg, "--out", "x"], dir.path());
        assert_eq!(code, 2, "{name}: {log}");
    }
    let (code, log) = fraclogi(&["eigen", "--config", "missing.toml"], dir.path());
    assert_eq!(code, 2, "{log}");
    let (code, _) = fraclogi(&["frobnicate"], dir.path());
    assert_eq!(code, 2);
    let unknown = write(dir.path(), "k.toml", "[scheme]\nhorizonn = 1.0\n");
    let (_, log) = fraclogi(&["evolve", "--config", &unknown], dir.path());
    assert!(log.contains("horizonn"), "{log}");
}

#[test]
fn solver_failure_exits_with_code_3_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL_GRID}[problem]\nq = 0.5\n[scheme]\nhorizon = 0.1\ninner_max_iterations = 1\nmax_halvings = 1\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let (code, log) = fraclogi(&["evolve", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(code, 3, "{log}");
    let report = json(&dir.path().join("run/report.json"));
    assert_eq!(report["partial"], true);
    assert!(dir.path().join("run/series.csv").exists());
    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["exit_code"], 3);
    assert!(manifest["error"].as_str().unwrap().contains("did not converge"));
}

#[test]
fn inconclusive_classification_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL_GRID}[problem]\nq = 3.0\n[initial]\nkind = \"zero\"\n");
    let cfg = write(dir.path(), "c.toml", &text);
    let (code, log) = fraclogi(&["classify", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(code, 4, "{log}");
    assert_eq!(
        json(&dir.path().join("run/report.json"))["membership"],
        "none_established"
    );
}

#[test]
fn classify_reports_witness_and_reads_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL_GRID}[problem]\nq = 3.0\nr = 2.0\n[initial]\nkind = \"refuge_nehari\"\namplitude = 2.0\n[scheme]\nhorizon = 1.0\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let (code, log) = fraclogi(&["classify", "--config", &cfg, "--out", "well"], dir.path());
    assert_eq!(code, 0, "{log}");
    let report = json(&dir.path().join("well/report.json"));
    assert_eq!(report["membership"], "in_h");
    assert_eq!(report["witness"], "fields/witness.csv");
    assert!(dir.path().join("well/fields/witness.csv").exists());

    let (code, log) = fraclogi(&["evolve", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(code, 0, "{log}");
    let evolved = json(&dir.path().join("run/report.json"));
    assert_eq!(evolved["classification"], "blowup_finite");
    let traj_cfg = format!(
        "{text}[classify]\ntrajectory = \"{}\"\n",
        dir.path().join("run/series.csv").display()
    );
    let cfg2 = write(dir.path(), "t.toml", &traj_cfg);
    let (code, log) = fraclogi(&["classify", "--config", &cfg2, "--out", "traj"], dir.path());
    assert_eq!(code, 0, "{log}");
    let report = json(&dir.path().join("traj/report.json"));
    assert_eq!(report["classification"], "blowup_finite");
    assert_eq!(report["t_max_estimate"], evolved["t_max_estimate"]);
}

#[test]
fn verify_reports_pass_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL_GRID}[verify]\nexponents = [1.5, 3.0]\nhomogeneity_samples = 10\ninequality_samples = 1000\naccretivity_pairs = 4\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let (code, log) = fraclogi(
        &["verify", "--config", &cfg, "--out", "v", "--threads", "2"],
        dir.path(),
    );
    assert_eq!(code, 0, "{log}");
    let report = json(&dir.path().join("v/report.json"));
    assert_eq!(report["all_passed"], true);
    assert_eq!(report["passed"], report["total"]);
    assert_eq!(report["homogeneity"].as_array().unwrap().len(), 2);
    assert_eq!(report["accretivity"]["ordered_pairs"], 2);
}

#[test]
fn scenarios_write_only_their_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (code, log) = fraclogi(&["scenario", "superlinear_lambda0", "--out", "s"], dir.path());
    assert_eq!(code, 0, "{log}");
    let entries: Vec<_> = fs::read_dir(dir.path().join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("superlinear_lambda0")]);
    let report = json(&dir.path().join("s/superlinear_lambda0/scenario.json"));
    assert_eq!(report["passed"], true);
    for path in report["evidence"].as_array().unwrap() {
        assert!(dir
            .path()
            .join("s/superlinear_lambda0")
            .join(path.as_str().unwrap())
            .exists());
    }
}

#[test]
fn growth_toward_a_large_steady_state_is_not_blowup() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[grid]\nnodes_per_axis = 101\n[problem]\nq = 1.0\nlambda = \"range(0.5)\"\n\
                [scheme]\ndt = 0.01\nhorizon = HORIZON\n[initial]\namplitude = 0.5\n";
    let short = write(dir.path(), "short.toml", &text.replace("HORIZON", "2.0"));
    let (code, log) = fraclogi(&["evolve", "--config", &short, "--out", "short"], dir.path());
    assert_eq!(code, 4, "{log}");
    assert_eq!(json(&dir.path().join("short/report.json"))["classification"], "running");
    let long = write(dir.path(), "long.toml", &text.replace("HORIZON", "15.0"));
    let (code, log) = fraclogi(&["evolve", "--config", &long, "--out", "long"], dir.path());
    assert_eq!(code, 0, "{log}");
    assert_eq!(
        json(&dir.path().join("long/report.json"))["classification"],
        "stabilized"
    );
}
