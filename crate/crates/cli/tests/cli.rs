//! End-to-end runs of the `mnp` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mnp_core::io::ResultRecord;

fn mnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnp")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn simulate(dir: &Path, n: usize, p: usize, l: usize, seed: u64) -> String {
    let data = dir.join(format!("sim_{n}_{p}_{l}_{seed}.csv"));
    let data = data.to_str().unwrap().to_string();
    ok(mnp(&[
        "simulate", "--n", &n.to_string(), "--p", &p.to_string(), "--L", &l.to_string(),
        "--seed", &seed.to_string(), "--nu2", "1", "--out", &data,
    ]));
    data
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(mnp(&[
            "simulate", "--n", "30", "--p", "2", "--L", "3", "--seed", "5", "--nu2", "2",
            "--out", out.to_str().unwrap(),
        ]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.truth.json")).unwrap(),
        fs::read(dir.path().join("b.truth.json")).unwrap()
    );
    let one_class = mnp(&[
        "simulate", "--n", "5", "--p", "1", "--L", "1", "--seed", "1", "--nu2", "1",
        "--out", a.to_str().unwrap(),
    ]);
    assert_eq!(code(&one_class), 2);
}

#[test]
fn exact_and_vb_fits_write_finite_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 10, 2, 3, 11);
    let out = dir.path().join("fit");
    ok(mnp(&[
        "fit", "--data", &data, "--method", "both", "--nu2", "4", "--seed", "3",
        "--n-samples", "10000", "--output-dir", out.to_str().unwrap(),
    ]));
    let rec = ResultRecord::read(&out).unwrap();
    let exact = rec.exact.as_ref().unwrap();
    assert!(exact.log_evidence.is_finite() && exact.log_evidence < 0.0);
    assert_eq!(exact.summary.coefficients.len(), 4);
    assert!(exact.summary.coefficients.iter().all(|c| c.mean.is_finite() && c.sd > 0.0));
    let vb = rec.vb.as_ref().unwrap();
    assert!(vb.converged);
    assert!(vb.elbo.unwrap() <= exact.log_evidence + 1e-3);
    for f in ["summary_exact.csv", "summary_vb.csv", "comparison.csv", "draws_exact.csv", "draws_vb.csv", "pfm_state.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(out.join("summary_exact.csv")).unwrap();
    assert!(header.starts_with("coef,class,covariate,mean,sd,q0.025,q0.5,q0.975\n"));

    // summarize reproduces the fit-time exact table
    let sum = ok(mnp(&["summarize", "--draws", out.join("draws_exact.csv").to_str().unwrap()]));
    assert_eq!(String::from_utf8(sum.stdout).unwrap(), header);
    let median = ok(mnp(&[
        "summarize", "--draws", out.join("draws_exact.csv").to_str().unwrap(), "--quantiles", "0.5",
    ]));
    let rows = csv_rows(&String::from_utf8(median.stdout).unwrap());
    assert_eq!(rows[0].last().unwrap(), "q0.5");
    assert_eq!(rows[0].len(), 6);
}

#[test]
fn single_observation_exact_and_vb_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 1, 1, 3, 4);
    let out = dir.path().join("fit");
    ok(mnp(&[
        "fit", "--data", &data, "--method", "both", "--nu2", "1", "--seed", "8",
        "--n-samples", "20000", "--output-dir", out.to_str().unwrap(),
    ]));
    let rec = ResultRecord::read(&out).unwrap();
    for row in rec.comparison.unwrap() {
        assert!(row.se_units.abs() < 3.0, "{row:?}");
    }
}

#[test]
fn predictions_follow_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 12, 2, 3, 21);
    let out = dir.path().join("fit");
    ok(mnp(&[
        "fit", "--data", &data, "--method", "exact", "--nu2", "2", "--seed", "1",
        "--n-samples", "500", "--output-dir", out.to_str().unwrap(),
    ]));
    let x = dir.path().join("x.csv");
    fs::write(&x, "x1,x2\n0,0\n0.7,-1.2\n0.7,-1.2\n").unwrap();
    let pred = ok(mnp(&[
        "predict", "--result", out.to_str().unwrap(), "--x", x.to_str().unwrap(), "--n-draws", "200",
    ]));
    let rows = csv_rows(&String::from_utf8(pred.stdout).unwrap());
    assert_eq!(rows[0], ["row", "method", "p1", "p2", "p3"]);
    let nums = |r: &[String]| r[2..].iter().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
    for v in nums(&rows[1]) {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }
    assert_eq!(nums(&rows[2]), nums(&rows[3]));
    assert!((nums(&rows[2]).iter().sum::<f64>() - 1.0).abs() < 1e-5);

    fs::write(&x, "x1\n0.5\n").unwrap();
    let bad = mnp(&["predict", "--result", out.to_str().unwrap(), "--x", x.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 30, 2, 3, 2);
    let out = dir.path().join("fit");
    let no_seed = mnp(&["fit", "--data", &data, "--nu2", "1", "--output-dir", out.to_str().unwrap()]);
    assert_eq!(code(&no_seed), 2);

    let stalled = mnp(&[
        "fit", "--data", &data, "--method", "vb", "--nu2", "25", "--seed", "1",
        "--max-sweeps", "1", "--eps", "1e-14", "--output-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&stalled), 4);
    let rec = ResultRecord::read(&out).unwrap();
    assert!(!rec.vb.unwrap().converged);

    let missing = mnp(&[
        "fit", "--data", dir.path().join("none.csv").to_str().unwrap(), "--nu2", "1", "--seed", "1",
        "--output-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 1);

    let empty = dir.path().join("draws_exact.csv");
    fs::write(&empty, "").unwrap();
    assert_ne!(code(&mnp(&["summarize", "--draws", empty.to_str().unwrap()])), 0);
}
