use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], config: Option<&str>, seed_env: Option<&str>, out: &Path) -> Output {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gradalign"));
    cmd.args(args).arg("--out").arg(out).env_remove("GRADALIGN_SEED");
    if let Some(text) = config {
        let path = dir.path().join("cfg.json");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    if let Some(s) = seed_env {
        cmd.env("GRADALIGN_SEED", s);
    }
    cmd.output().unwrap()
}

const SMALL: &str = r#"{"shots": [1], "seeds": [1, 2], "epochs": 4, "gradcheck_cases": 3}"#;

#[test]
fn gradcheck_succeeds() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], Some(SMALL), None, out.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
}

#[test]
fn config_errors_exit_with_two() {
    let out = tempfile::tempdir().unwrap();
    for bad in [r#"{"unknown": 1}"#, r#"{"seeds": []}"#, "not json"] {
        let o = run(&["fewshot"], Some(bad), None, out.path());
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
    assert_eq!(run(&["fewshot"], Some(SMALL), Some("abc"), out.path()).status.code(), Some(2));
    assert_eq!(run(&["fewshot", "--seeds", "0"], Some(SMALL), None, out.path()).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"], None, None, out.path()).status.code(), Some(2));
}

#[test]
fn diverging_runs_exit_with_one_and_are_recorded() {
    let out = tempfile::tempdir().unwrap();
    let cfg = r#"{"vlm": {"tau": 1e-9}, "domain": {"noise_sigma": 0.5}, "shots": [16], "seeds": [1],
                  "epochs": 3, "batch_size": 80}"#;
    let o = run(&["fewshot"], Some(cfg), None, out.path());
    assert_eq!(o.status.code(), Some(1));
    let csv = fs::read_to_string(out.path().join("fewshot.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains("infinite loss")));
}

#[test]
fn seed_override_and_seed_count() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let read = |d: &Path| fs::read_to_string(d.join("fewshot.csv")).unwrap();
    assert!(run(&["fewshot", "--seeds", "3"], Some(SMALL), Some("5"), a.path()).status.success());
    assert!(run(&["fewshot", "--seeds", "3"], Some(SMALL), Some("5"), b.path()).status.success());
    assert!(run(&["fewshot", "--seeds", "3"], Some(SMALL), Some("6"), c.path()).status.success());
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
    assert_eq!(read(a.path()).lines().count(), 1 + 2 * 3);
}

#[test]
fn plot_flag_writes_svg() {
    let out = tempfile::tempdir().unwrap();
    let cfg = r#"{"shots": [1], "angle_shots": [1], "seeds": [1], "epochs": 4}"#;
    assert!(run(&["angles", "--plot", "--threads", "2"], Some(cfg), None, out.path()).status.success());
    let svg = fs::read_to_string(out.path().join("angles.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}
