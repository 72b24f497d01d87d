use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn posilure(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posilure"))
        .args(args)
        .output()
        .unwrap()
}

fn json_run(args: &[&str]) -> (i32, Value) {
    let mut full = args.to_vec();
    full.extend(["--format", "json"]);
    let out = posilure(&full);
    let report = serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), report)
}

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const SCALAR_SYSTEM: &str = r#""system": {"A": [[-1]], "B": [[1]], "C": [[1]]},
  "perturbation": {"D": [[1]], "E": [[1]], "norm": "two"}"#;

#[test]
fn check_reports_each_gate() {
    let a = fixture("example_a.json");
    let (code, report) = json_run(&["check", "--problem", a.to_str().unwrap()]);
    assert_eq!(code, 2);
    let gates = &report["results"]["gates"];
    assert_eq!(gates["metzler_at_lower"], false);
    assert_eq!(gates["metzler_at_upper"], true);
    assert_eq!(gates["hurwitz_at_upper"], true);
    assert!(!report["warnings"].as_array().unwrap().is_empty());

    let b = fixture("example_b.json");
    let (code, report) = json_run(&["check", "--problem", b.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert_eq!(report["results"]["gates"]["hurwitz_at_upper"], false);
    assert_eq!(report["results"]["gates"]["metzler_at_lower"], true);

    let lin = fixture("linear_identity.json");
    let (code, report) = json_run(&["check", "--problem", lin.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(report["results"]["verdict"], true);
}

#[test]
fn check_text_uses_pass_fail() {
    let a = fixture("example_a.json");
    let out = posilure(&["check", "--problem", a.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("metzler_at_lower: fail"));
    assert!(text.contains("hurwitz_at_upper: pass"));
}

#[test]
fn ragged_matrix_is_an_input_error_with_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        &dir,
        "bad.json",
        "{\"system\": {\"A\": [[1, 2],\n[3]], \"B\": [[1]], \"C\": [[1]]},\n\"perturbation\": {\"D\": [[1]], \"E\": [[1]]}}",
    );
    let out = posilure(&["check", "--problem", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.json:2:"), "{err}");
    assert!(err.contains("ragged"), "{err}");
}

#[test]
fn inconsistent_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        &dir,
        "dims.json",
        "{\n\"system\": {\"A\": [[-1, 0], [0, -1]], \"B\": [[1]], \"C\": [[1, 1]]},\n\"perturbation\": {\"D\": [[1], [1]], \"E\": [[1, 1]]}\n}",
    );
    let out = posilure(&["radius", "--problem", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains(":2:"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(posilure(&["bogus"]).status.code(), Some(1));
    assert_eq!(posilure(&["check"]).status.code(), Some(1));
    let a = fixture("example_a.json");
    assert_eq!(
        posilure(&[
            "radius",
            "--problem",
            a.to_str().unwrap(),
            "--norm",
            "three"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(posilure(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let both = write(
        &dir,
        "both.json",
        &format!("{{{SCALAR_SYSTEM}, \"sector\": {{\"Sigma1\": [[0]], \"Sigma2\": [[1]]}}, \"builtin_nonlinearity\": \"cubic_sine\"}}"),
    );
    assert_eq!(
        posilure(&["check", "--problem", both.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn radius_paths() {
    let lin = fixture("linear_identity.json");
    let (code, report) = json_run(&["radius", "--problem", lin.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!((report["results"]["radius"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let a = fixture("example_a.json");
    let (code, report) = json_run(&["radius", "--problem", a.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(report["results"]["radius"].is_null());

    let (code, report) = json_run(&[
        "radius",
        "--problem",
        a.to_str().unwrap(),
        "--override-gates",
        "--norm",
        "two",
    ]);
    assert_eq!(code, 0);
    assert!((report["results"]["radius"].as_f64().unwrap() - 0.6488904180285573).abs() < 1e-12);
    let warnings = report["warnings"].as_array().unwrap();
    assert!(warnings
        .iter()
        .any(|w| w.as_str().unwrap().contains("OVERRIDDEN")));

    let dir = tempfile::tempdir().unwrap();
    let certified = write(
        &dir,
        "certified.json",
        &format!("{{{SCALAR_SYSTEM}, \"sector\": {{\"Sigma1\": [[0]], \"Sigma2\": [[0.5]]}}}}"),
    );
    let (code, report) = json_run(&["radius", "--problem", certified.to_str().unwrap()]);
    assert_eq!(code, 0);
    // A + B Σ₂ C = -0.5, so r = 0.5.
    assert!((report["results"]["radius"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(report["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn nn_bound_reports() {
    let net = fixture("example_b_network.json");
    let (code, report) = json_run(&["nn-bound", "--network", net.to_str().unwrap()]);
    assert_eq!(code, 0);
    let g2 = report["results"]["gamma2"][0][0].as_f64().unwrap();
    assert!((g2 - 0.91).abs() < 1e-12);
    assert_eq!(report["results"]["gamma1"][0][0].as_f64().unwrap(), -g2);
    assert_eq!(
        report["results"]["layer_products"]
            .as_array()
            .unwrap()
            .len(),
        2
    );

    let dir = tempfile::tempdir().unwrap();
    let zero = write(
        &dir,
        "zero.json",
        r#"{"activation": {"name": "relu", "a1": 0, "a2": 1},
            "layers": [{"rows": 1, "cols": 1, "weights": [0], "bias": [0]},
                       {"rows": 1, "cols": 1, "weights": [0], "bias": [0]}]}"#,
    );
    let (code, report) = json_run(&["nn-bound", "--network", zero.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(report["results"]["gamma2"][0][0].as_f64().unwrap(), 0.0);

    let biased = write(
        &dir,
        "biased.json",
        r#"{"activation": {"name": "relu", "a1": 0, "a2": 1},
            "layers": [{"rows": 1, "cols": 1, "weights": [1], "bias": [0]},
                       {"rows": 1, "cols": 1, "weights": [1], "bias": [0.5]}]}"#,
    );
    let out = posilure(&["nn-bound", "--network", biased.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bias") && err.contains('1'), "{err}");
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(
        &dir,
        "zero.json",
        &format!("{{{SCALAR_SYSTEM}, \"sector\": {{\"Sigma1\": [[0]], \"Sigma2\": [[0.5]]}}, \"sweep\": [0, 0]}}"),
    );
    let csv = dir.path().join("sweep.csv");
    let (code, report) = json_run(&[
        "sweep",
        "--problem",
        problem.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--trials",
        "3",
    ]);
    assert_eq!(code, 0);
    // Equal deltas share one summary row.
    let summary = report["results"]["summary"].as_array().unwrap();
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0]["stable"], 6);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "delta,trial,seed,verdict,decay_ratio,blowup_time"
    );
    assert_eq!(lines.count(), 6);
}

#[test]
fn sweep_derives_default_deltas_and_dumps_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write(
        &dir,
        "p.json",
        &format!("{{{SCALAR_SYSTEM}, \"sector\": {{\"Sigma1\": [[0]], \"Sigma2\": [[0.5]]}}, \"simulation\": {{\"dt\": 0.01, \"horizon\": 5}}}}"),
    );
    let traj = dir.path().join("traj");
    let (code, report) = json_run(&[
        "sweep",
        "--problem",
        problem.to_str().unwrap(),
        "--trials",
        "2",
        "--trajectories",
        traj.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let deltas: Vec<f64> = report["results"]["deltas"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(deltas, vec![0.25, 0.4, 0.5, 0.6, 0.75]);
    assert_eq!(std::fs::read_dir(&traj).unwrap().count(), 10);
    let first = std::fs::read_to_string(traj.join("delta00_trial00.csv")).unwrap();
    assert_eq!(first.lines().next().unwrap(), "t,x_1,y_1");
    assert_eq!(first.lines().count(), 502);
}

#[test]
fn refine_with_given_delta() {
    let b = fixture("example_b.json");
    let (code, report) = json_run(&[
        "refine",
        "--problem",
        b.to_str().unwrap(),
        "--delta-crit",
        "3.15",
    ]);
    assert_eq!(code, 0);
    let magnitude = report["results"]["magnitude"].as_f64().unwrap();
    assert!((magnitude - 0.373115577889447).abs() < 1e-12);

    let a = fixture("example_a.json");
    assert_eq!(
        posilure(&[
            "refine",
            "--problem",
            a.to_str().unwrap(),
            "--delta-crit",
            "1"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn reports_are_deterministic() {
    let b = fixture("example_b.json");
    let args = [
        "sweep",
        "--problem",
        b.to_str().unwrap(),
        "--trials",
        "3",
        "--format",
        "json",
    ];
    let first = posilure(&args);
    let second = posilure(&args);
    assert_eq!(first.stdout, second.stdout);
    assert!(!first.stdout.is_empty());
}
