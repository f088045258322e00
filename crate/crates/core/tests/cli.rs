use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("frontstab-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn frontstab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frontstab")).args(args).arg("--out").arg(out).output().unwrap()
}

fn with_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn check_passes_and_is_reproducible() {
    let dir = scratch("repeat");
    let first = frontstab(&["check", "--jobs", "1"], &dir);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let a = std::fs::read(dir.join("check.csv")).unwrap();
    let b = std::fs::read(dir.join("constants.csv")).unwrap();
    let again = frontstab(&["check", "--jobs", "1"], &dir);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(a, std::fs::read(dir.join("check.csv")).unwrap());
    assert_eq!(b, std::fs::read(dir.join("constants.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().any(|l| l.starts_with("evans winding")));
}

#[test]
fn report_without_artifacts_exits_2() {
    let dir = scratch("empty");
    let out = frontstab(&["report"], &dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifacts"));
}

#[test]
fn bistable_model_fails_check() {
    let dir = scratch("nagumo");
    let cfg = with_config(&dir, "[model]\nname = \"nagumo\"\n");
    let out = frontstab(&["check", "--config", &cfg], &dir);
    assert_eq!(out.status.code(), Some(1));
    let text = std::fs::read_to_string(dir.join("check.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("unstable U_plus,false")), "{text}");
}

#[test]
fn unweighted_fisher_has_no_spectral_gap() {
    let dir = scratch("kappa0");
    let cfg = with_config(&dir, "[weight]\nkappa = 0.0\n");
    let out = frontstab(&["check", "--config", &cfg], &dir);
    assert_eq!(out.status.code(), Some(1));
    let text = std::fs::read_to_string(dir.join("check.csv")).unwrap();
    assert!(text.lines().any(|l| l.contains("gap") && l.contains("false")), "{text}");
}

#[test]
fn downstream_stage_refuses_failed_check() {
    let dir = scratch("refuse");
    let cfg = with_config(&dir, "[weight]\nkappa = 0.0\n");
    assert_eq!(frontstab(&["check", "--config", &cfg], &dir).status.code(), Some(1));
    let out = frontstab(&["green", "--config", &cfg], &dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("green_summary.csv").exists());
}
