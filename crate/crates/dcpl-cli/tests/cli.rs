use std::process::{Command, Output};

use serde_json::Value;

fn dcpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcpl")).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn ladder_for_65536() {
    let out = dcpl(&["ladder", "--R", "65536"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    let r = &v["result"];
    assert_eq!(r["N"], 2);
    assert_eq!(r["scales"], serde_json::json!([1.0, 16.0]));
    assert_eq!(r["R_N"], 256.0);
    assert_eq!(r["L"], 16.0);
    assert_eq!(v["config"]["subcommand"], "ladder");
}

#[test]
fn inadmissible_exponents_exit_with_one() {
    let out = dcpl(&["decouple", "--p", "3", "--q", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("admissible"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dcpl(&["ladder", "--R", "300"]).status.code(), Some(1));
    assert_eq!(dcpl(&["synth", "--family", "nope"]).status.code(), Some(1));
    assert_eq!(dcpl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dcpl(&["caps", "--level", "9"]).status.code(), Some(1));
    assert_eq!(dcpl(&["ladder", "--format", "binary-field"]).status.code(), Some(1));
    assert_eq!(dcpl(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"R": 1024, "level": 2, "seed": 99}"#).unwrap();
    let cfg = path.to_str().unwrap();
    let out = dcpl(&["caps", "--config", cfg, "--R", "256"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["config"]["R"], 256);
    assert_eq!(v["config"]["level"], 2);
    assert_eq!(v["config"]["seed"], 99);
    assert_eq!(v["result"]["count"], 32);

    std::fs::write(&path, r#"{"radius": 3}"#).unwrap();
    assert_eq!(dcpl(&["ladder", "--config", cfg]).status.code(), Some(1));
}

#[test]
fn csv_starts_with_config_line() {
    let out = dcpl(&["caps", "--R", "256", "--beta", "0.5", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    let cfg: Value = serde_json::from_str(first.strip_prefix("# config: ").unwrap()).unwrap();
    assert_eq!(cfg["small_caps"], true);
    assert_eq!(lines.next().unwrap(), "a,b,closed_right,index");
    assert_eq!(lines.count(), 32);
}

#[test]
fn binary_field_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("field.bin");
    let out = dcpl(&["synth", "--family", "flat", "--format", "binary-field", "--output", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let field = dcpl_core::synthesis::SampledField::read_binary(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(field.grid.m, 1024);
    assert_eq!(field.values.len(), 1024 * 1024);
    let summary = json_of(&dcpl(&["synth", "--family", "flat"]));
    let sup = summary["result"]["sup_norm"].as_f64().unwrap();
    assert!((field.sup_norm() - sup).abs() <= 1e-12 * sup);
}

#[test]
fn runs_are_reproducible() {
    for args in [
        &["cutoff-selftest"][..],
        &["envelope", "--R-list", "256", "--family", "random_phase", "--alpha", "2,4"][..],
        &["decouple", "--R-list", "256", "--family", "gaussian,block"][..],
    ] {
        let a = dcpl(args);
        let b = dcpl(args);
        assert_eq!(a.status.code(), Some(0), "{args:?}");
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let args = ["prune", "--family", "flat", "--alpha-quantile", "0.25"];
    let one = Command::new(env!("CARGO_BIN_EXE_dcpl")).args(args).env("DCPL_THREADS", "1").output().unwrap();
    let two = Command::new(env!("CARGO_BIN_EXE_dcpl")).args(args).env("DCPL_THREADS", "2").output().unwrap();
    assert_eq!(one.status.code(), Some(0));
    let (a, b) = (json_of(&one), json_of(&two));
    let ra = &a["result"]["runs"][0]["invariants"];
    let rb = &b["result"]["runs"][0]["invariants"];
    assert_eq!(ra["kept_fraction"], rb["kept_fraction"]);
    assert_eq!(a["result"]["runs"][0]["gauge_sizes"], b["result"]["runs"][0]["gauge_sizes"]);
    let (ta, tb) = (ra["telescoping_residual"].as_f64().unwrap(), rb["telescoping_residual"].as_f64().unwrap());
    assert!(ta <= 1e-12 && tb <= 1e-12);
}
