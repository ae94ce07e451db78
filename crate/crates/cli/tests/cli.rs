use std::path::Path;
use std::process::{Command, Output};

fn fematch(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fematch"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn sample(system: &str, out: &Path) {
    let o = fematch(&["sample", "--system", system, "--steps", "20000", "--chains", "2", "--stride", "10"], out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn tica_keeps_the_requested_components() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    sample("double_well_2d", &data);
    let input = data.join("chains/traj_000.bin");
    let out = dir.path().join("tica");
    let o = fematch(&["tica", "--input", input.to_str().unwrap(), "--lag", "10", "--components", "2"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = json(&out.join("tica.json"));
    assert_eq!(model["eigenvalues"].as_array().unwrap().len(), 2);
    assert!(out.join("tica.manifest.json").exists());
}

#[test]
fn evaluate_rejects_mismatched_features_and_names_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let two = dir.path().join("two");
    let one = dir.path().join("one");
    sample("double_well_2d", &two);
    sample("double_well_1d", &one);
    let truth = two.join("chains/traj_000.bin");
    let model = one.join("chains/traj_000.bin");
    let o = fematch(
        &["evaluate", "--truth", truth.to_str().unwrap(), "--model", model.to_str().unwrap()],
        &dir.path().join("eval"),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(truth.to_str().unwrap()), "{err}");
    assert!(err.contains(model.to_str().unwrap()), "{err}");
}

#[test]
fn small_pipeline_writes_a_kl_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = fematch(
        &[
            "pipeline", "--system", "double_well_2d", "--steps", "50000", "--chains", "2", "--max-epochs", "5",
            "--n-basis", "8", "--n-hidden", "8", "--lambda-energy", "0",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&dir.path().join("kl_report.json"));
    let kl = report["kl_nats"].as_f64().unwrap();
    assert!(kl.is_finite() && kl >= 0.0);
}

#[test]
fn help_lists_defaults() {
    let o = Command::new(env!("CARGO_BIN_EXE_fematch")).args(["pipeline", "--help"]).output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for default in ["[default: 10]", "[default: 100]", "[default: 0.5]", "[default: 300.0]", "[default: 0]"] {
        assert!(text.contains(default), "missing {default}");
    }
}

#[test]
fn unknown_flags_exit_with_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_fematch")).args(["tica", "--no-such-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
