mod common;

use std::path::Path;
use std::process::Command;

use common::gaussian;
use nmtune::cli::{run, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use nmtune::io::{read_labels, write_fmat, write_labels, LabelFile};
use nmtune::linalg::Matrix;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn call(args: &[&str]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("nmtune").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every stderr line parses as a JSON object carrying the exit code.
fn assert_json_error(o: &Outcome, kind: &str) {
    let lines: Vec<&str> = o.stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["error"], kind);
    assert_eq!(v["code"], o.code);
    assert!(!v["message"].as_str().unwrap().is_empty());
}

#[test]
fn analyze_rank_one_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r1.fmat");
    let mut m = Matrix::zeros(6, 4);
    for i in 0..6 {
        for j in 0..4 {
            m.set(i, j, (i as f64 + 1.0) * (j as f64 - 1.5));
        }
    }
    write_fmat(&m, &path).unwrap();
    let o = call(&["analyze", s(&path)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["sve"], 0.0);
    assert_eq!(v["lsvr"], 0.0);
    assert_eq!(v["rank"], 1);

    let out = dir.path().join("reports");
    let o = call(&["--out", s(&out), "analyze", s(&path), "--top-k", "2"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let written = out.join("r1.spectrum.json");
    assert_eq!(o.stdout.trim(), s(&written));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&written).unwrap()).unwrap();
    assert_eq!(v["sigma_top"].as_array().unwrap().len(), 2);
}

#[test]
fn zero_gamma_noise_is_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("y.labels");
    let lf = LabelFile {
        labels: (0..50).map(|i| i % 4).collect(),
        classes: Some(4),
    };
    write_labels(&lf, &path).unwrap();
    let o = call(&["--seed", "3", "inject-noise", s(&path), "--gamma", "0"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert_eq!(o.stdout.as_bytes(), std::fs::read(&path).unwrap().as_slice());

    let out = dir.path().join("noisy");
    let o = call(&["--seed", "3", "--out", s(&out), "inject-noise", s(&path), "--gamma", "0.2"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let noisy = read_labels(&out.join("y.noisy.labels")).unwrap();
    let moved = noisy.labels.iter().zip(&lf.labels).filter(|(a, b)| a != b).count();
    assert_eq!(moved, 10);
    assert_eq!(noisy.classes, Some(4));
}

#[test]
fn usage_errors_exit_one() {
    let o = call(&["analyze"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert_json_error(&o, "usage");
    let o = call(&["frobnicate"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert_json_error(&o, "usage");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("y.labels");
    write_labels(&LabelFile { labels: vec![0, 1, 0], classes: None }, &path).unwrap();
    let o = call(&["inject-noise", s(&path), "--gamma", "1.5"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert_json_error(&o, "usage");
    let o = call(&["sweep", "--config", s(&path)]);
    assert_eq!(o.code, EXIT_USAGE, "sweep without --out");
    assert_json_error(&o, "usage");
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = call(&["analyze", s(&dir.path().join("missing.fmat"))]);
    assert_eq!(o.code, EXIT_DATA);
    assert_json_error(&o, "data");

    let bad = dir.path().join("bad.fmat");
    std::fs::write(&bad, b"not a matrix at all, just some bytes").unwrap();
    let o = call(&["analyze", s(&bad)]);
    assert_eq!(o.code, EXIT_DATA);
    assert_json_error(&o, "data");

    let labels = dir.path().join("y.labels");
    std::fs::write(&labels, "0\nseven\n").unwrap();
    let o = call(&["inject-noise", s(&labels), "--gamma", "0.1"]);
    assert_eq!(o.code, EXIT_DATA);
    assert_json_error(&o, "data");

    let o = call(&["report", s(dir.path())]);
    assert_eq!(o.code, EXIT_DATA);
    assert_json_error(&o, "data");
}

#[test]
fn zero_spectrum_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.fmat");
    write_fmat(&Matrix::zeros(5, 3), &path).unwrap();
    let o = call(&["analyze", s(&path)]);
    assert_eq!(o.code, EXIT_NUMERIC);
    assert_json_error(&o, "numeric");
}

#[test]
fn tune_writes_a_result_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x.fmat"), dir.path().join("y.labels"));
    let mut f = gaussian(40, 5, 12);
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    for (i, &y) in labels.iter().enumerate() {
        f.set(i, 0, f.get(i, 0) + if y == 1 { 5.0 } else { -5.0 });
    }
    write_fmat(&f, &x).unwrap();
    write_labels(&LabelFile { labels, classes: Some(2) }, &y).unwrap();
    let out = dir.path().join("run");
    let args = ["--seed", "4", "--out", s(&out), "tune", "--features", s(&x), "--labels", s(&y)];
    let o = call(&args);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["mode"], "LP");
    assert_eq!(v["seed"], 4);
    assert!(v["accuracy"].as_f64().unwrap() > 0.95, "{v}");
    assert!(out.join("head.json").exists());
    assert_eq!(
        std::fs::read(out.join("eval_result.json")).unwrap(),
        o.stdout.as_bytes()
    );
    // same seed, same bytes
    let again = call(&args);
    assert_eq!(again.stdout, o.stdout);
}

#[test]
fn binary_reports_errors_on_stderr() {
    let exe = env!("CARGO_BIN_EXE_nmtune");
    let out = Command::new(exe).args(["analyze", "/nonexistent/x.fmat"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(out.stdout.is_empty());
    let text = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["error"], "data");

    let help = Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8(help.stdout).unwrap().contains("inject-noise"));
}
