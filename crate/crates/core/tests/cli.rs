use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_grplasso-te"));
    c.env("RUST_LOG", "warn").env("GRPLASSO_TE_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn grplasso-te")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated two-arm dataset written by the `draw` subcommand.
fn draw(dir: &Path, n: usize, p: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("draw{seed}"));
    let o = run(&[
        "draw",
        "--n",
        &n.to_string(),
        "--p",
        &p.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("data.csv")
}

#[test]
fn draw_writes_a_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 50, 6, 1);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y,d,x1,x2,x3,x4,x5");
    assert_eq!(lines.count(), 50);
    let truth = read_json(&csv.parent().unwrap().join("truth.json"));
    assert_eq!(truth["ate"], 2.0);
}

#[test]
fn fit_writes_two_reports_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 300, 10, 2);
    let out = dir.path().join("fit");
    let o = run(&["fit", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let paths: Vec<&str> = stdout.lines().collect();
    assert_eq!(paths.len(), 2);
    assert!(paths.iter().all(|p| Path::new(p).exists()));

    let prop = read_json(&out.join("fit_propensity.json"));
    let outc = read_json(&out.join("fit_outcome.json"));
    assert_eq!(prop["model"], "propensity");
    assert_eq!(outc["model"], "outcome");
    assert_eq!(prop["manifest"], outc["manifest"]);
    assert_eq!(prop["manifest"], read_json(&out.join("manifest.json")));
    let m = &prop["manifest"];
    assert_eq!(m["command"], "fit");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["settings"]["pipeline"]["penalty"]["mode"], "iterative");
    assert_eq!(m["settings"]["pipeline"]["penalty"]["delta_d"], 4.5);
    for r in [&prop, &outc] {
        assert!(r["penalized"]["selected"].is_array());
        assert!(r["penalized"]["coefficients"]["raw"].is_array());
        assert!(r["penalized"]["kkt"]["max_violation"].is_number());
        assert!(r["theory_diagnostics"]["propensity_eig"].is_object());
        assert_eq!(r["penalized"]["coefficients"]["columns"][0], "(intercept)");
    }
    // propensity has T = 1 coefficient column, outcome has T + 1
    assert_eq!(prop["penalized"]["coefficients"]["standardized"][0].as_array().unwrap().len(), 1);
    assert_eq!(outc["penalized"]["coefficients"]["standardized"][0].as_array().unwrap().len(), 2);
}

#[test]
fn usage_errors_exit_64() {
    let o = run(&["fit", "--data", "x.csv", "--outcome", "y"]);
    assert_eq!(code(&o), 64);
    assert!(stderr(&o).contains("--treatment"));
    assert_eq!(code(&run(&["fit", "--unknown-flag"])), 64);
    assert_eq!(code(&run(&[])), 64);
    let h = run(&["--help"]);
    assert_eq!(code(&h), 0);
    assert!(String::from_utf8_lossy(&h.stdout).contains("Exit codes"));
}

#[test]
fn data_errors_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("none");
    let o = run(&["fit", "--data", "/no/such/file.csv", "--outcome", "y", "--treatment", "d", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    let csv = draw(dir.path(), 80, 5, 3);
    let o = run(&["fit", "--data", s(&csv), "--outcome", "nope", "--treatment", "d", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope"));
    assert!(!out.exists());
}

#[test]
fn huge_cv_grid_selects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 200, 8, 4);
    let out = dir.path().join("fit");
    let o = run(&[
        "fit", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--cv-grid", "1e6", "--cv-folds", "3",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["fit_propensity.json", "fit_outcome.json"] {
        let r = read_json(&out.join(f));
        assert_eq!(r["penalized"]["selected"].as_array().unwrap().len(), 0, "{f}");
        assert_eq!(r["penalized"]["lambda"], 1e6);
        assert_eq!(r["penalty"]["mode"], "cross_validation");
    }
}

#[test]
fn ate_contrast_interval_and_absent_level() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 400, 10, 5);
    let out = dir.path().join("ate");
    let o = run(&[
        "ate", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--contrast", "mu1-mu0", "--union",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("effects.json"));
    assert_eq!(r["estimand"], "ate");
    let iv = &r["contrasts"][0]["interval"];
    let (lo, est, hi) = (iv["lower"].as_f64().unwrap(), iv["estimate"].as_f64().unwrap(), iv["upper"].as_f64().unwrap());
    assert!(lo < est && est < hi);
    let mu = r["dose_response"]["mu_hat"].as_array().unwrap();
    assert!((est - (mu[1].as_f64().unwrap() - mu[0].as_f64().unwrap())).abs() < 1e-12);
    assert_eq!(r["dose_response"]["v"].as_array().unwrap().len(), 2);
    assert_eq!(r["manifest"]["settings"]["source"]["estimate"]["pipeline"]["use_union"], true);
    assert_eq!(r["floor"]["floor"], 0.001);

    let bad = dir.path().join("bad");
    let o = run(&[
        "ate", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--contrast", "mu2-mu0", "--out", s(&bad),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!bad.exists());
}

#[test]
fn att_with_trimming_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 400, 10, 6);
    let out = dir.path().join("att");
    let o = run(&["att", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--trim", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("effects.json"));
    assert_eq!(r["estimand"], "att");
    let t = &r["trim"];
    let before = t["comparisons_before"].as_u64().unwrap();
    let after = t["comparisons_after"].as_u64().unwrap();
    assert_eq!(before - after, t["dropped"].as_u64().unwrap());
    assert_eq!(r["n_used"].as_u64().unwrap(), 400 - t["dropped"].as_u64().unwrap());
    assert_eq!(r["contrasts"][0]["contrast"], "tau1");
}

#[test]
fn effects_from_fit_reports_match_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 300, 8, 7);
    let fit = dir.path().join("fit");
    let o = run(&["fit", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--out", s(&fit)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = dir.path().join("a");
    let o = run(&["ate", "--fit", s(&fit), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = dir.path().join("b");
    let o = run(&["ate", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ra = read_json(&a.join("effects.json"));
    let rb = read_json(&b.join("effects.json"));
    assert_eq!(ra["contrasts"], rb["contrasts"]);
    assert_eq!(ra["dose_response"], rb["dose_response"]);
}

#[test]
fn fit_replays_byte_identically_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = draw(dir.path(), 250, 8, 8);
    let first = dir.path().join("first");
    let o = run(&[
        "fit", "--data", s(&csv), "--outcome", "y", "--treatment", "d", "--lambda-mode", "cv", "--cv-folds", "3",
        "--seed", "11", "--out", s(&first),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let second = dir.path().join("second");
    let o = run(&["--from-manifest", s(&first.join("manifest.json")), "--out", s(&second)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["fit_propensity.json", "fit_outcome.json", "manifest.json"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }

    // a changed input is refused
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str(&text.lines().nth(1).unwrap().to_string());
    text.push('\n');
    std::fs::write(&csv, text).unwrap();
    let o = run(&["--from-manifest", s(&first.join("manifest.json")), "--out", s(&dir.path().join("third"))]);
    assert_eq!(code(&o), 2);
}

fn grid_file(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("grid.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const ONE_CELL: &str = "\
seed = 5
[[cell]]
n = 200
p = 10
rho = 0.25
alpha = 4.0
";

#[test]
fn coverage_one_cell_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let grid = grid_file(dir.path(), ONE_CELL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["coverage", "--grid", s(&grid), "--reps", "2", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), s(&out.join("coverage.csv")));
    }
    let bytes = std::fs::read(a.join("coverage.csv")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("coverage.csv")).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("n,p,rho_beta,rho_gamma,alpha_beta,alpha_gamma"));

    let c = dir.path().join("c");
    let o = run(&["--from-manifest", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("coverage.csv")).unwrap(), std::fs::read(c.join("coverage.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn simulate_writes_one_row_per_replication() {
    let dir = tempfile::tempdir().unwrap();
    let grid = grid_file(
        dir.path(),
        "reps = 3\n[product]\nn = [150]\np = [8]\nrho = [0.25, 1.0]\nalpha = [4.0]\n",
    );
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--grid", s(&grid), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("replications.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("1,150,8,0.25"));
    assert!(rows[5].starts_with("2,150,8,1,"));
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["schemas"]["replications.csv"], "grplasso-te/replication-csv/1");
}

#[test]
fn invalid_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["[[cell]]\nn = 100\np = 2\nrho = 1.0\nalpha = 2.0\n", "not toml ][", "reps = 2\n"] {
        let grid = grid_file(dir.path(), body);
        let out = dir.path().join("o");
        let o = run(&["coverage", "--grid", s(&grid), "--reps", "1", "--out", s(&out)]);
        assert_eq!(code(&o), 2, "{body}: {}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn progress_goes_to_stderr_only() {
    let dir = tempfile::tempdir().unwrap();
    let grid = grid_file(dir.path(), ONE_CELL);
    let out = dir.path().join("o");
    let o = bin()
        .args(["coverage", "--grid", s(&grid), "--reps", "1", "--out", s(&out)])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("cell 1/1"));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);
}
