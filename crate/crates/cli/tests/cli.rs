use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: [&str; 8] = ["--set", "stations=6", "--set", "days=4", "--set", "base_seconds=300", "--set", "fault_rate=0.05"];
const STAGES: [&str; 9] = ["synth", "ingest", "health", "impute", "fit-mu", "speed", "traveltime", "fit-predictors", "eval"];

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("loopgrid-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn loopgrid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopgrid")).arg("--dir").arg(dir).args(SMALL).args(args).output().unwrap()
}

fn pipeline(dir: &Path) {
    for stage in STAGES {
        let out = loopgrid(dir, &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn small_world_pipeline() {
    let dir = scratch("pipeline");
    pipeline(&dir);

    let health = fs::read_to_string(dir.join("health.csv")).unwrap();
    let rows: Vec<&str> = health.lines().skip(1).collect();
    assert_eq!(rows.len(), 6 * 4 * 2);
    assert!(rows.iter().any(|r| r.contains(",bad,")));

    let out = loopgrid(&dir, &["predict", "--depart", "08:00"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("origin,destination"));
    let minutes: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(minutes > 0.0 && minutes.is_finite());

    let out = loopgrid(&dir, &["plot", "--figure", "fig10"]);
    assert!(out.status.success());
    assert!(fs::read_to_string(dir.join("plot_fig10.csv")).unwrap().lines().count() > 1);

    let rmse = fs::read_to_string(dir.join("rmse.csv")).unwrap();
    for m in ["historical", "current", "regression"] {
        assert!(rmse.contains(m), "{m} missing from rmse.csv");
    }
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn reruns_are_identical() {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    pipeline(&a);
    pipeline(&b);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 16);
    for n in names {
        assert!(fs::read(a.join(&n)).unwrap() == fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
    fs::remove_dir_all(&a).unwrap();
    fs::remove_dir_all(&b).unwrap();
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = scratch("unknown");
    let out = loopgrid(&dir, &["--set", "bogus=1", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim(), "error module=config kind=UnknownKey message=unknown configuration key `bogus`");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_upstream_artifact() {
    let dir = scratch("missing");
    let out = loopgrid(&dir, &["speed"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error module=") && err.contains("kind=MissingInput"), "{err}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn library_entry_matches_binary() {
    let err = loopgrid_cli::run(["loopgrid", "--set", "stations", "synth"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = loopgrid_cli::run(["loopgrid", "--set", "slot_seconds=7", "synth"]);
    assert!(err.is_err_and(|e| e.exit_code() == 2));
}
