use std::path::Path;
use std::process::{Command, Output};

use caplab::radial::{radial_capacity, CapacityResult, CapacitySequence, SlopeFit};
use caplab::regime::{Outcome, RegimeVerdict};
use caplab::verifier::CertificationReport;
use caplab::WeightField;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn caplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caplab"))
        .args(args)
        .env("CAPLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Parses a JSON report and checks that re-serializing reproduces it byte for byte.
fn round_trip<T: DeserializeOwned + Serialize>(text: &str) -> T {
    let value: T = serde_json::from_str(text).unwrap();
    let again = serde_json::to_string_pretty(&value).unwrap() + "\n";
    assert_eq!(again, text);
    value
}

#[test]
fn cap_reports_the_classical_condenser() {
    let out = stdout(&caplab(&[
        "cap", "--n", "3", "--p", "2", "--sigma", "0", "--rin", "1", "--rout", "2",
    ]));
    let result: CapacityResult = round_trip(&out);
    let expected = 8.0 * std::f64::consts::PI;
    assert!((result.value - expected).abs() < 1e-6 * expected);
    let w = WeightField::radial_power(3, 0.0).unwrap();
    assert_eq!(result, radial_capacity(2.0, &w, 1.0, 2.0).unwrap());
}

#[test]
fn zero_weight_has_zero_capacity() {
    let out = stdout(&caplab(&[
        "cap", "--n", "3", "--p", "2", "--weight", "zero", "--rin", "1", "--rout", "2",
    ]));
    let result: CapacityResult = round_trip(&out);
    assert_eq!(result.value, 0.0);
}

#[test]
fn malformed_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [
        ("unknown.toml", "nn = 3\n"),
        ("broken.toml", "n = [\n"),
        ("broken.json", "{\"n\": }"),
    ] {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        let out = caplab(&["--config", path.to_str().unwrap(), "cap"]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(!out.stderr.is_empty());
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn missing_parameters_exit_with_two() {
    let out = caplab(&[
        "cap", "--n", "3", "--sigma", "0", "--rin", "1", "--rout", "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`p`"));
}

#[test]
fn config_file_drives_cap() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("cap.toml");
    std::fs::write(
        &toml,
        "n = 2\np = 2.0\nsigma = 0.0\nr_in = 1.0\nr_out = 2.718281828459045\n",
    )
    .unwrap();
    let json = dir.path().join("cap.json");
    std::fs::write(
        &json,
        r#"{"n": 2, "p": 2.0, "sigma": 0.0, "r_in": 1.0, "r_out": 2.718281828459045}"#,
    )
    .unwrap();
    let a = stdout(&caplab(&["--config", toml.to_str().unwrap(), "cap"]));
    let b = stdout(&caplab(&["--config", json.to_str().unwrap(), "cap"]));
    assert_eq!(a, b);
    let result: CapacityResult = round_trip(&a);
    assert!((result.value - 2.0 * std::f64::consts::PI).abs() < 1e-6);
}

#[test]
fn discrete_cap_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("phi.csv");
    let out = stdout(&caplab(&[
        "cap",
        "--n",
        "2",
        "--p",
        "2",
        "--sigma",
        "0",
        "--rin",
        "1",
        "--rout",
        "2.718281828459045",
        "--method",
        "discrete",
        "--h",
        "0.0625",
        "--reflect",
        "--dump",
        dump.to_str().unwrap(),
    ]));
    let result: CapacityResult = round_trip(&out);
    let exact = 2.0 * std::f64::consts::PI;
    assert!(
        (result.value - exact).abs() < 0.03 * exact,
        "{}",
        result.value
    );
    assert!(result.diagnostics.converged);
    let csv = std::fs::read_to_string(&dump).unwrap();
    assert!(csv.lines().count() > 10);
}

#[test]
fn iteration_limit_exits_with_four() {
    let out = caplab(&[
        "cap",
        "--n",
        "2",
        "--p",
        "3",
        "--sigma",
        "0",
        "--rin",
        "1",
        "--rout",
        "2",
        "--method",
        "discrete",
        "--max-iters",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn mask_file_defines_plates() {
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("mask.csv");
    let mut rows = String::from("# role,i,j\n");
    for i in 0..12usize {
        for j in 0..12usize {
            if (5..7).contains(&i) && (5..7).contains(&j) {
                rows.push_str(&format!("inner,{i},{j}\n"));
            }
            if i == 0 || j == 0 || i == 11 || j == 11 {
                rows.push_str(&format!("outer,{i},{j}\n"));
            }
        }
    }
    std::fs::write(&mask, rows).unwrap();
    let out = stdout(&caplab(&[
        "cap",
        "--n",
        "2",
        "--p",
        "2",
        "--weight",
        "identity",
        "--mask",
        mask.to_str().unwrap(),
        "--grid-origin",
        "0,0",
        "--grid-spacing",
        "0.1",
        "--grid-shape",
        "12,12",
    ]));
    let result: CapacityResult = round_trip(&out);
    assert!(result.value > 0.0 && result.value.is_finite());

    std::fs::write(&mask, "inner,1\n").unwrap();
    let bad = caplab(&[
        "cap",
        "--n",
        "2",
        "--p",
        "2",
        "--weight",
        "identity",
        "--mask",
        mask.to_str().unwrap(),
        "--grid-origin",
        "0,0",
        "--grid-spacing",
        "0.1",
        "--grid-shape",
        "12,12",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn scan_slope_matches_the_model_exponent() {
    let args = [
        "scan", "--n", "3", "--p", "2", "--sigma", "0", "--format", "json",
    ];
    let out = stdout(&caplab(&args));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let fit: SlopeFit = serde_json::from_value(report["fit"].clone()).unwrap();
    let seq: CapacitySequence = serde_json::from_value(report["sequence"].clone()).unwrap();
    assert!((fit.slope - 1.0).abs() < 0.05);
    assert_eq!(report["predicted_slope"].as_f64(), Some(1.0));
    assert_eq!(seq.entries.len(), 31);
    assert_eq!(out, stdout(&caplab(&args)));
}

#[test]
fn scan_csv_is_deterministic_and_full_precision() {
    let args = [
        "scan",
        "--n",
        "3",
        "--p",
        "2",
        "--sigma",
        "0",
        "--radii",
        "10,100,1000",
    ];
    let a = stdout(&caplab(&args));
    assert_eq!(a, stdout(&caplab(&args)));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "R,value");
    assert_eq!(lines.len(), 4);
    let value: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let exact = 4.0 * std::f64::consts::PI * 10.0;
    assert!((value - exact).abs() < 1e-6 * exact);
    let mantissa = lines[1]
        .split(',')
        .nth(1)
        .unwrap()
        .split('e')
        .next()
        .unwrap();
    assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17);
}

#[test]
fn scan_with_empty_radius_list_exits_with_two() {
    let out = caplab(&["scan", "--n", "3", "--p", "2", "--sigma", "0", "--radii"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scan.toml");
    std::fs::write(&cfg, "n = 3\np = 2.0\nsigma = 0.0\nradii = []\n").unwrap();
    let out = caplab(&["--config", cfg.to_str().unwrap(), "scan"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn frakc_scan_reports_a_negative_slope() {
    let out = stdout(&caplab(&[
        "frakc", "--n", "3", "--sigma", "0", "--q", "2", "--nu", "0.5", "--format", "json",
    ]));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let fit: SlopeFit = serde_json::from_value(report["fit"].clone()).unwrap();
    let predicted = report["predicted_slope"].as_f64().unwrap();
    assert!(
        (fit.slope - predicted).abs() < 0.05,
        "{} vs {predicted}",
        fit.slope
    );
    assert!(fit.slope < 0.0);
}

#[test]
fn svg_output_is_written_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plot.svg");
    let out = caplab(&[
        "scan",
        "--n",
        "3",
        "--p",
        "2",
        "--sigma",
        "0",
        "--format",
        "svg",
        "--out",
        path.to_str().unwrap(),
    ]);
    stdout(&out);
    assert!(out.stdout.is_empty());
    let svg = std::fs::read_to_string(&path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("href"));
    assert_eq!(svg.matches("<circle").count(), 31);
    assert!(svg.contains("fitted slope 1.0000"));
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1);
}

#[test]
fn verify_certifies_the_linear_pair() {
    let out = stdout(&caplab(&[
        "verify",
        "--example",
        "7",
        "--n",
        "3",
        "--sigma",
        "-3",
        "--mu",
        "0.25",
    ]));
    let report: CertificationReport = round_trip(&out);
    assert!(report.passed);
    assert!(report.residual.min_residual >= 0.0);
    assert_eq!(report.bumps.len(), 12);
}

#[test]
fn verify_calibrates_alpha_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ex5.toml");
    std::fs::write(
        &cfg,
        "example = \"5\"\nn = 3\nq = 4.0\nsigma = 0.0\nmu = 0.4\n",
    )
    .unwrap();
    let out = stdout(&caplab(&["--config", cfg.to_str().unwrap(), "verify"]));
    let report: CertificationReport = round_trip(&out);
    assert!(report.passed);
    assert!(report.calibration.is_some());
}

#[test]
fn verify_rejects_q_below_the_critical_exponent() {
    let out = caplab(&[
        "verify",
        "--example",
        "5",
        "--n",
        "3",
        "--sigma",
        "0",
        "--q",
        "2",
        "--mu",
        "0.4",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
}

#[test]
fn verify_identical_pair_passes_with_zero_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("same.toml");
    std::fs::write(
        &cfg,
        "example = \"custom\"\nn = 3\nq = 2.0\nsigma = 0.0\nu = [{ coeff = 1.0, exponent = -1.0 }]\nv = [{ coeff = 1.0, exponent = -1.0 }]\n",
    )
    .unwrap();
    let out = stdout(&caplab(&["--config", cfg.to_str().unwrap(), "verify"]));
    let report: CertificationReport = round_trip(&out);
    assert!(report.passed);
    assert!(report.bumps.iter().all(|b| b.gap == 0.0));
}

fn verdict(args: &[&str]) -> RegimeVerdict {
    round_trip(&stdout(&caplab(args)))
}

#[test]
fn classify_reports_model_verdicts() {
    let v = verdict(&["classify", "--n", "3", "--q", "2", "--sigma", "0"]);
    assert_eq!(v.outcome, Outcome::LiouvilleHolds);
    assert_eq!(v.authority.unwrap().to_string(), "Thm6");
    let v = verdict(&["classify", "--n", "3", "--q", "4", "--sigma", "0"]);
    assert_eq!(v.outcome, Outcome::CounterexampleExists);
    assert_eq!(v.authority.unwrap().to_string(), "Ex5");
    let v = verdict(&["classify", "--n", "2", "--q", "1", "--sigma", "-2"]);
    assert_eq!(v.outcome, Outcome::CounterexampleExists);
    assert_eq!(v.authority.unwrap().to_string(), "Ex7");
    assert!(v.boundary);
}

#[test]
fn classify_from_capacity() {
    let v = verdict(&[
        "classify",
        "--n",
        "3",
        "--q",
        "1",
        "--sigma",
        "0",
        "--from-capacity",
    ]);
    assert_eq!(v.outcome, Outcome::LiouvilleHolds);
    assert_eq!(v.authority.unwrap().to_string(), "Thm7");
    let v = verdict(&[
        "classify",
        "--n",
        "3",
        "--q",
        "4",
        "--sigma",
        "0",
        "--from-capacity",
    ]);
    assert_eq!(v.outcome, Outcome::OutsideScope);
}

#[test]
fn truthtable_rows_agree() {
    let out = stdout(&caplab(&["truthtable"]));
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("n,q,sigma,model_outcome"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 10);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn truthtable_from_config_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("table.toml");
    std::fs::write(
        &cfg,
        "points = [[3, 2.0, 0.0], [3, 4.0, 0.0]]\n[output]\nformat = \"json\"\n",
    )
    .unwrap();
    let out = stdout(&caplab(&["--config", cfg.to_str().unwrap(), "truthtable"]));
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["model"]["authority"], "Ex5");
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_caplab"))
        .args(["classify", "--n", "3", "--q", "2", "--sigma", "0"])
        .env("CAPLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_path_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("verdict.csv");
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            "n = 3\nq = 2.0\nsigma = 0.0\n[output]\nformat = \"csv\"\npath = {:?}\n",
            target.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = caplab(&["--config", cfg.to_str().unwrap(), "classify"]);
    stdout(&out);
    let csv = std::fs::read_to_string(Path::new(&target)).unwrap();
    assert_eq!(
        csv,
        "outcome,authority,boundary\nliouville_holds,Thm6,false\n"
    );
}
