use std::path::Path;
use std::process::Command;

const STATIONARY: &str = r#"
schema_version = 1
kind = "stationary"
[problem]
domain = "ball:1"
coefficients = "anisotropic_quadratic"
boundary = "x1_squared"
[grid]
h = 0.0625
[stationary]
eps = [0.2, 0.1]
"#;

fn metastab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_metastab"))
        .args(args)
        .output()
        .unwrap()
}

fn run_with(dir: &Path, sub: &str, config: &str) -> std::process::Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    metastab(&[
        sub,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn passing_run_exits_zero_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(dir.path(), "stationary", STATIONARY);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for name in ["report.json", "config.resolved.toml", "plot.csv"] {
        assert!(dir.path().join("out").join(name).is_file(), "{name}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("stationary passed"));
}

#[test]
fn failed_check_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let strict = STATIONARY.replace("eps = [0.2, 0.1]", "eps = [0.2, 0.1]\ntolerance = 1e-6");
    let o = run_with(dir.path(), "stationary", &strict);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL"));
    assert!(dir.path().join("out").join("report.json").is_file());
}

#[test]
fn execution_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let o = metastab(&[
        "stationary",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run_with(
        dir.path(),
        "stationary",
        &STATIONARY.replace("[grid]", "[grid]\nunknown = 1"),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = run_with(dir.path(), "certify", STATIONARY);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = metastab(&["explode", "--config", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(metastab(&["--help"]).status.code(), Some(0));
}
