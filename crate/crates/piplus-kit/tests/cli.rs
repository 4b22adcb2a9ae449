use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_piplus-kit"));
    c.env_remove("PIPLUS_THREADS");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn lq_piplus_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let lq = scenario("lq.toml");
    let o = run(
        &[
            "run",
            "--scenario",
            lq.to_str().unwrap(),
            "--algo",
            "piplus",
            "--iters",
            "10",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "trace.csv",
        "summary.json",
        "bounds.csv",
        "bounds.json",
        "checks.json",
        "config.toml",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let echoed = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(echoed.contains("iters = 10"));
    assert!(echoed.contains(&dir.path().display().to_string()));
    let checks = json(&dir.path().join("checks.json"));
    assert_eq!(checks[0]["check"], "monotone");
    assert_eq!(checks[0]["pass"], true);
}

#[test]
fn adversarial_pi_on_counterexample_reports_feasibility() {
    let dir = tempfile::tempdir().unwrap();
    let ce = scenario("counterexample.toml");
    let o = run(
        &[
            "run",
            "--scenario",
            ce.to_str().unwrap(),
            "--algo",
            "pi",
            "--select",
            "adversarial",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4));
    let f = json(&dir.path().join("feasibility.json"));
    assert_eq!(f["iteration"], 2);
    assert_eq!(f["reason"]["kind"], "lsc_gap");
    let gap = f["reason"]["report"]["gap"].as_f64().unwrap();
    assert!((gap - 15.0 / 28.0).abs() < 0.005 * 15.0 / 28.0, "{gap}");
}

#[test]
fn zero_iterations_emit_only_the_initial_value() {
    let dir = tempfile::tempdir().unwrap();
    let lq = scenario("lq.toml");
    let o = run(&["run", "--scenario", lq.to_str().unwrap(), "--iters", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.lines().skip(1).all(|l| l.starts_with("0,")));
    assert_eq!(json(&dir.path().join("checks.json"))[0]["n_samples"], 0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nkind = \"counterexample\"\n\n[algo]\niterations = 3\n").unwrap();
    let o = run(&["run", "--scenario", bad.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("iterations") && err.contains("line 5"), "{err}");

    let missing = run(&["run", "--scenario", "/nonexistent.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(2));

    let lq = scenario("lq.toml");
    let o = bin()
        .env("PIPLUS_THREADS", "zero")
        .args(["bounds", "--scenario", lq.to_str().unwrap(), "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bounds_header_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let lq = scenario("lq.toml");
    let o = run(&["bounds", "--scenario", lq.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
    let meta = json(&dir.path().join("bounds.json"));
    let first = text.lines().next().unwrap();
    assert_eq!(first, format!("# i_star={}", meta["i_star"]));
    for line in text.lines().skip(2) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        if cols[0] == 0.0 {
            assert_eq!(cols[2], 0.0);
        }
    }
}

#[test]
fn exponential_bounds_match_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("lq_exp.toml");
    let base = fs::read_to_string(scenario("lq.toml")).unwrap();
    fs::write(&sc, base.replace("[bounds]", "[bounds]\nexponential = true")).unwrap();
    let o = run(&["bounds", "--scenario", sc.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let p0: f64 = 1.25 / (1.0 - 0.16);
    let text = fs::read_to_string(dir.path().join("out/bounds.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(2) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let want = p0 * (1.0 - 1.0 / p0).powi(cols[1] as i32) * cols[0];
        assert!((cols[2] - want).abs() <= 1e-10 * (1.0 + want), "{line}");
        rows += 1;
    }
    assert_eq!(rows, 11 * 21);
}

#[test]
fn identical_configs_give_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ce = scenario("counterexample.toml");
    let args = [
        "run",
        "--scenario",
        ce.to_str().unwrap(),
        "--select",
        "random",
        "--seed",
        "7",
        "--iters",
        "3",
    ];
    assert_eq!(run(&args, a.path()).status.code(), Some(0));
    assert_eq!(run(&args, b.path()).status.code(), Some(0));
    for f in ["trace.csv", "bounds.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn verify_passes_on_lq() {
    let dir = tempfile::tempdir().unwrap();
    let lq = scenario("lq.toml");
    let o = run(&["verify", "--scenario", lq.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let checks = json(&dir.path().join("checks.json"));
    assert_eq!(checks.as_array().unwrap().len(), 6);
    assert!(checks.as_array().unwrap().iter().all(|c| c["pass"] == true));
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("k,x0,u0,cost,sigma\n"));
}

#[test]
fn demo_reports_the_tie_and_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("PIPLUS_THREADS", "2")
        .args(["demo-counterexample", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let tie = json(&dir.path().join("tie.json"));
    assert!((tie["v1_with_u1_times_28"].as_f64().unwrap() - 396.0).abs() < 1e-9);
    assert!((tie["v1_with_u0_times_28"].as_f64().unwrap() - 381.0).abs() < 1e-9);
    assert_eq!(tie["h1_set"], serde_json::json!([0.0, 1.0]));
    let gap = json(&dir.path().join("gap.json"));
    assert!((gap["g_limit"].as_f64().unwrap() * 28.0 - 696.0).abs() < 1e-9);
    assert_eq!(gap["stable"], true);
    let transcript = fs::read_to_string(dir.path().join("transcript.csv")).unwrap();
    assert_eq!(transcript.lines().count(), 1 + 6);
}
