use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lamperti"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"[chain]
family = "birth_death"
mu = 2.0
b = 1.0

[solve]
N = 400

[mc]
seed = 3
gamma_steps = 2000
gamma_replicas = 200
renewal_x = 20
renewal_replicas = 100
occupation_steps = 20000
occupation_replicas = 2
occupation_upto = 20
"#;

#[test]
fn malformed_config_reports_line() {
    let d = tempfile::tempdir().unwrap();
    let p = write(
        d.path(),
        "bad.toml",
        "[chain]\nfamily = \"birth_death\"\nmu = 2.0\nb = = 1\n",
    );
    let o = run(&["classify", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let p = write(
        d.path(),
        "k.toml",
        "[chain]\nfamily = \"birth_death\"\nmu = 2.0\nb = 1.0\nnu = 3\n",
    );
    assert_eq!(
        run(&["solve", "--config", p.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_config_and_bad_flags_exit_2() {
    assert_eq!(run(&["classify"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let c = configs().join("canonical.toml");
    let o = run(&[
        "solve",
        "--config",
        c.to_str().unwrap(),
        "--fit-window",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_1() {
    // 2μ < b: no positive harmonic function of the required growth.
    let d = tempfile::tempdir().unwrap();
    let p = write(
        d.path(),
        "weak.toml",
        "[chain]\nfamily = \"birth_death\"\nmu = 0.2\nb = 1.0\n",
    );
    let o = run(&["transform", "--config", p.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn classify_prints_verdict() {
    let c = configs().join("transient.toml");
    let o = run(&["classify", "--config", c.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["classification"], "transient");
}

#[test]
fn simulate_is_deterministic() {
    let c = configs().join("canonical.toml");
    let args = [
        "simulate",
        "--config",
        c.to_str().unwrap(),
        "--steps",
        "3000",
        "--replicas",
        "5",
        "--seed",
        "11",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout.iter().filter(|&&ch| ch == b'\n').count(), 5);
    let other = run(&[
        "simulate",
        "--config",
        c.to_str().unwrap(),
        "--steps",
        "3000",
        "--replicas",
        "5",
        "--seed",
        "12",
    ]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn report_bundle_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "small.toml", SMALL);
    let mut bundles = Vec::new();
    for tag in ["a", "b"] {
        let out = d.path().join(tag);
        let o = run(&[
            "report",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        bundles.push(out);
    }
    let mut names: Vec<_> = fs::read_dir(&bundles[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for want in [
        "summary.json",
        "stationary.csv",
        "harmonic.csv",
        "kernel.csv",
        "tail_fit.json",
        "report.md",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    for n in names.iter().filter(|n| *n != "metadata.json") {
        let a = fs::read(bundles[0].join(n)).unwrap();
        let b = fs::read(bundles[1].join(n)).unwrap();
        assert!(a == b, "{n} differs between runs");
    }
}

#[test]
fn canonical_verify_passes() {
    let d = tempfile::tempdir().unwrap();
    let c = configs().join("canonical.toml");
    let o = run(&[
        "verify",
        "--config",
        c.to_str().unwrap(),
        "--out-dir",
        d.path().to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let s: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["all_pass"], true);
    assert_eq!(s["checks"].as_array().unwrap().len(), 10);
}
