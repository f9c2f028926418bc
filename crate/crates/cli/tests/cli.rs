use std::path::Path;
use std::process::{Command, Output};

fn morphoscale(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphoscale"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

const SCHEMA: &str = r#"[{"id":"gz2","roots":["smooth"],"questions":[
  {"id":"smooth","label":"Smooth","answers":[{"id":"smooth","label":""},{"id":"featured","label":"","child_question":"bar"}]},
  {"id":"bar","label":"Bar","answers":[{"id":"yes","label":""},{"id":"no","label":""}]}]}]"#;

const RUNS: &str = "family,variant,parameter_count,dataset_size,seed,test_loss
convnext,nano,15000000,123000,0,19.64
convnext,nano,15000000,123000,1,19.61
convnext,nano,15000000,246000,0,19.39
convnext,nano,15000000,246000,1,19.37
convnext,nano,15000000,492000,0,19.13
convnext,nano,15000000,492000,1,19.15
";

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        &["schema", "validate"][..],
        &["simulate"],
        &["loss"],
        &["grad-check"],
        &["fit-scaling"],
        &["predict"],
        &["fit-gp"],
        &["aggregate"],
        &["train-toy"],
    ] {
        let mut args = sub.to_vec();
        args.push("--help");
        let out = morphoscale(&args, dir.path());
        assert!(out.status.success(), "{sub:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        morphoscale(&["no-such-command"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        morphoscale(&["predict", "--m", "1"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn schema_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ok.json"), SCHEMA).unwrap();
    std::fs::write(
        dir.path().join("cycle.json"),
        r#"[{"id":"c","roots":["q"],"questions":[{"id":"q","label":"","answers":[{"id":"a","label":"","child_question":"q"}]}]}]"#,
    )
    .unwrap();
    assert!(
        morphoscale(&["-q", "schema", "validate", "ok.json"], dir.path())
            .status
            .success()
    );
    let bad = morphoscale(&["-q", "schema", "validate", "cycle.json"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cycle"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphoscale(&["-q", "fit-scaling", "--runs", "absent.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn point_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphoscale(
        &[
            "-q", "predict", "--m", "-0.84", "--b", "23.91", "--n", "492000",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "19.129");
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphoscale(&["-q", "grad-check", "--seed", "3"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn fit_scaling_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("runs.csv"), RUNS).unwrap();
    let args = [
        "-q",
        "fit-scaling",
        "--runs",
        "runs.csv",
        "--sigma",
        "0.052",
        "--seed",
        "11",
        "--steps",
        "1500",
    ];
    let a = morphoscale(&args, dir.path());
    let b = morphoscale(&args, dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let fit: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let m = fit["params"]["m"]["median"].as_f64().unwrap();
    assert!((m + 0.84).abs() < 0.2, "{m}");
}
