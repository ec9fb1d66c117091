use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dirireg::dirichlet::{fit_ml, DirichletParams};
use tempfile::TempDir;

fn dirireg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dirireg"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dirireg(args);
    assert!(
        out.status.success(),
        "dirireg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> String {
    let out = dirireg(args);
    assert!(!out.status.success(), "dirireg {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, sorted by name.
fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn assert_same_outputs(a: &Path, b: &Path) {
    let (fa, fb) = (files(a), files(b));
    assert!(!fa.is_empty());
    assert_eq!(
        fa.iter().map(|p| p.file_name().unwrap()).collect::<Vec<_>>(),
        fb.iter().map(|p| p.file_name().unwrap()).collect::<Vec<_>>()
    );
    for (x, y) in fa.iter().zip(&fb) {
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs between runs", x.display());
    }
}

fn simulate_a(dir: &Path) -> PathBuf {
    ok(&["simulate", "--scenario", "A", "--seed", "3", "--out", s(dir)]);
    dir.join("data.csv")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn fit_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let data = simulate_a(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "fit", "--input", s(&data), "--mean-cols", "level:factor", "--chains", "2", "--iters", "400", "--seed", "5",
            "--out", s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_same_outputs(&a, &b);
    for f in ["fit_summary.csv", "chain_1.csv", "chain_2.csv", "mu_intervals.csv", "plotdata_intervals.csv"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let (header, rows) = read_csv(&a.join("plotdata_intervals.csv"));
    assert_eq!(header, ["group", "dimension", "estimate", "lower", "upper", "method"]);
    assert!(rows.iter().any(|r| r[5] == "bayes-credible"));
}

#[test]
fn fit_ml_and_simulate_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let (sa, sb) = (tmp.path().join("sa"), tmp.path().join("sb"));
    ok(&["simulate", "--scenario", "B", "--seed", "8", "--out", s(&sa)]);
    ok(&["simulate", "--scenario", "B", "--seed", "8", "--out", s(&sb)]);
    assert_same_outputs(&sa, &sb);

    let data = sa.join("data.csv");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "fit-ml", "--input", s(&data), "--mean-cols", "level:factor,x2", "--precision-cols", "x2", "--seed", "2",
            "--out", s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_same_outputs(&a, &b);
    let (_, coefs) = read_csv(&a.join("ml_coefficients.csv"));
    assert!(coefs.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn study_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let stdout = ok(&[
            "study", "--scenario", "A", "--replicates", "2", "--iters", "400", "--chains", "2", "--seed", "7", "--out",
            s(&out),
        ]);
        (out, stdout)
    };
    let ((a, text), (b, _)) = (run("a"), run("b"));
    assert_same_outputs(&a, &b);
    assert!(text.contains("Coverage"));
    let (header, _) = read_csv(&a.join("study_summary.csv"));
    assert!(!header.is_empty());
    assert!(a.join("pvalues.csv").is_file());
}

#[test]
fn intercept_only_ml_mean_matches_dirichlet_fit() {
    let tmp = TempDir::new().unwrap();
    let sample = DirichletParams::new(vec![2.0, 3.0, 5.0]).unwrap().sample(300, 17);
    let mut text = String::from("y1,y2,y3\n");
    for c in &sample {
        let p = c.parts();
        text.push_str(&format!("{:?},{:?},{:?}\n", p[0], p[1], p[2]));
    }
    let data = tmp.path().join("intercept.csv");
    fs::write(&data, text).unwrap();
    let out = tmp.path().join("ml");
    ok(&["fit-ml", "--input", s(&data), "--out", s(&out)]);

    let alpha = fit_ml(&sample, 1e-12, 10_000).unwrap();
    let a0 = alpha.alpha0();
    let (_, rows) = read_csv(&out.join("mu_intervals.csv"));
    let first: Vec<f64> = rows.iter().filter(|r| r[0] == "1").map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(first.len(), 3);
    for (j, m) in first.iter().enumerate() {
        assert!((m - alpha.alpha()[j] / a0).abs() < 1e-6, "part {j}: {m} vs {}", alpha.alpha()[j] / a0);
    }
}

#[test]
fn malformed_row_reports_line_number() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("bad.csv");
    fs::write(&data, "y1,y2,x\n0.2,0.8,1\n0.3,oops,2\n").unwrap();
    let err = fails(&["fit-ml", "--input", s(&data), "--mean-cols", "x", "--out", s(tmp.path())]);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn unknown_column_is_named() {
    let tmp = TempDir::new().unwrap();
    let data = simulate_a(tmp.path());
    let err = fails(&["fit", "--input", s(&data), "--mean-cols", "nosuch", "--out", s(tmp.path())]);
    assert!(err.contains("nosuch"), "{err}");
}

#[test]
fn random_effects_without_group_names_the_flag() {
    let tmp = TempDir::new().unwrap();
    let data = simulate_a(tmp.path());
    let err = fails(&["fit", "--input", s(&data), "--random-effects", "--out", s(tmp.path())]);
    assert!(err.contains("--group"), "{err}");
}

#[test]
fn invalid_scenario_lists_options() {
    let tmp = TempDir::new().unwrap();
    let err = fails(&["study", "--scenario", "C", "--out", s(tmp.path())]);
    assert!(err.contains("A, B"), "{err}");
    let err = fails(&["study", "--scenario", "A", "--replicates", "0", "--out", s(tmp.path())]);
    assert!(err.contains("replicate"), "{err}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let data = simulate_a(tmp.path());
    let cfg = tmp.path().join("run.json");
    let out_file = tmp.path().join("from_file");
    let out_flag = tmp.path().join("from_flag");
    fs::write(
        &cfg,
        format!(
            r#"{{"input": "{}", "mean-cols": ["level:factor"], "out": "{}", "seed": 4}}"#,
            s(&data),
            s(&out_file)
        ),
    )
    .unwrap();
    ok(&["fit-ml", "--config", s(&cfg)]);
    assert!(out_file.join("ml_coefficients.csv").is_file());
    ok(&["fit-ml", "--config", s(&cfg), "--out", s(&out_flag)]);
    assert_same_outputs(&out_file, &out_flag);

    fs::write(&cfg, r#"{"chain": 2}"#).unwrap();
    let err = fails(&["fit-ml", "--config", s(&cfg)]);
    assert!(err.contains("chain"), "{err}");
}

#[test]
fn netball_demo_runs_all_four_analyses() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("nb");
    ok(&["demo", "netball", "--iters", "600", "--chains", "2", "--seed", "3", "--out", s(&out)]);
    for f in ["netball.csv", "netball_effects.csv", "fit_summary.csv", "plotdata_intervals.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let (_, rows) = read_csv(&out.join("plotdata_intervals.csv"));
    let methods: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(methods.len(), 4, "{methods:?}");
    let (header, summary) = read_csv(&out.join("fit_summary.csv"));
    let median = header.iter().position(|h| h == "median").unwrap();
    let scales: Vec<f64> = summary
        .iter()
        .filter(|r| r[0].starts_with("sigma_u"))
        .map(|r| r[median].parse().unwrap())
        .collect();
    assert_eq!(scales.len(), 3);
    assert!(scales.iter().all(|v| *v > 0.0));
}

#[test]
fn written_data_round_trips_through_the_loader() {
    let tmp = TempDir::new().unwrap();
    let data = simulate_a(tmp.path());
    let out = tmp.path().join("ml");
    ok(&["fit-ml", "--input", s(&data), "--mean-cols", "level:factor", "--out", s(&out)]);
    // output tables parse as data files too
    let (header, rows) = read_csv(&out.join("mu_intervals.csv"));
    assert_eq!(header, ["row", "dimension", "mean", "lower", "upper"]);
    assert_eq!(rows.len(), 60 * 3);
}
