//! Exit-code contract and output formats, through the built binary.

use std::path::Path;
use std::process::{Command, Output};

use compound_forms_cli::config::{RunConfig, BUILTIN_NAMES};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compound-forms"))
}

fn run(args: &[&str]) -> (i32, String) {
    let Output { status, stdout, .. } = bin().args(args).output().expect("binary runs");
    (
        status.code().expect("exited"),
        String::from_utf8_lossy(&stdout).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|row| row.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn builtins_round_trip_through_json() {
    for name in BUILTIN_NAMES {
        let cfg = RunConfig::builtin(name).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn schema_covers_the_config_fields() {
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../../../docs/run-config.schema.json")).expect("schema is JSON");
    for name in BUILTIN_NAMES {
        let value: serde_json::Value = serde_json::from_str(&RunConfig::builtin(name).unwrap().to_json()).unwrap();
        for (key, v) in value.as_object().unwrap() {
            let prop = &schema["properties"][key];
            assert!(!prop.is_null(), "{key} missing from schema");
            if let (Some(obj), Some(props)) = (v.as_object(), prop["properties"].as_object()) {
                for sub in obj.keys() {
                    assert!(props.contains_key(sub), "{key}.{sub} missing from schema");
                }
            }
        }
    }
}

#[test]
fn validate_builtins() {
    for name in BUILTIN_NAMES {
        let (code, out) = run(&["validate", "--config", name]);
        assert_eq!(code, 0, "{name}\n{out}");
        assert!(!out.contains("FAIL"));
    }
}

#[test]
fn validate_reports_clash_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "clash.json",
        r#"{
          "manifold": {"dim": 4, "resolution": [4, 4, 4, 4]},
          "operator": {
            "a": [0, 0, 1, -1], "k": 1,
            "psi": {"target_rank": 1, "values": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]},
            "right_action": {"values": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}
          },
          "params": {"subdomain": {"zero_degrees": [3]}}
        }"#,
    );
    let (code, out) = run(&["validate", "--config", &cfg]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("(i=3, l=0)"), "{out}");
    assert!(out.contains("FAIL degree 2 is zeroed"), "{out}");
}

#[test]
fn malformed_json_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\"manifold\": {\"dim\": 2,");
    let (code, out) = run(&["validate", "--config", &cfg]);
    assert_eq!(code, 2);
    assert!(out.contains("line"), "{out}");
    let (code, _) = run(&["validate", "--config", "/nonexistent/config.json"]);
    assert_eq!(code, 2);
}

#[test]
fn check_passes_on_default_config() {
    let (code, out) = run(&["check"]);
    assert_eq!(code, 0, "{out}");
    for suite in ["adjointness", "Hodge star", "wedge", "gradient", "Nijenhuis"] {
        assert!(
            out.lines().any(|l| l.starts_with("[pass]") && l.contains(suite)),
            "{suite}\n{out}"
        );
    }
}

#[test]
fn check_fails_with_broken_adjoint() {
    let (code, out) = run(&["check", "--inject-fault", "broken-adjoint"]);
    assert_eq!(code, 1);
    assert!(out.contains("[FAIL] adjointness"), "{out}");
    assert!(out.contains("[pass] Hodge star"), "{out}");
}

#[test]
fn check_resolution_minimum() {
    assert_eq!(run(&["check", "--resolution", "3"]).0, 2);
    assert_eq!(run(&["check", "--resolution", "4"]).0, 0);
}

#[test]
fn flow_rejects_zero_steps() {
    assert_eq!(run(&["flow", "--steps", "0"]).0, 2);
    assert_eq!(run(&["flow", "--step-size", "-1"]).0, 2);
}

#[test]
fn flow_from_standard_structure_is_stationary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "j0.json",
        r#"{"manifold": {"dim": 2, "resolution": [8, 8]}, "operator": "almost-complex",
            "initial": {"kind": "standard-j"}, "params": {"steps": 100}}"#,
    );
    let out = dir.path().join("flow.csv");
    let (code, _) = run(&["flow", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let rows = read_csv(&out);
    assert_eq!(rows.len(), 101);
    for r in &rows {
        assert!(r[3] <= 1e-10, "grad_norm {}", r[3]);
        assert_eq!(r[2], rows[0][2]);
    }
}

#[test]
fn flow_blow_up_keeps_last_good_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow.csv");
    let (code, msg) = run(&[
        "flow",
        "--step-size",
        "1e3",
        "--steps",
        "200",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    let rows = read_csv(&out);
    let last = rows.last().unwrap();
    assert!(msg.contains(&format!("last good step {}", last[0])), "{msg}");
    assert!(last.iter().all(|v| v.is_finite()));
}

#[test]
fn flow_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(run(&["flow", "--seed", "3", "--out", a.to_str().unwrap()]).0, 0);
    let status = bin()
        .args(["flow", "--seed", "3", "--out", b.to_str().unwrap()])
        .env("COMPOUND_FORMS_THREADS", "1")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(a.starts_with(b"step,time,energy,grad_norm,P_residual_norm\n"));
    assert_eq!(a, b);
}

#[test]
fn thread_cap_must_be_positive() {
    let status = bin()
        .args(["validate"])
        .env("COMPOUND_FORMS_THREADS", "0")
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn residual_corpus_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "corpus.json",
        r#"{"manifold": {"dim": 2, "resolution": [8, 8]}, "operator": "almost-complex",
            "params": {"corpus": [
              {"seed": 1, "amplitude": 0.3, "dims": 2, "resolution": 8},
              {"seed": 2, "amplitude": 0.3, "dims": 4, "resolution": 8}]}}"#,
    );
    let out = dir.path().join("res.csv");
    let (code, _) = run(&["residual", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed,resolution,P_norm,N_norm,verdict");
    assert!(lines[1].ends_with(",integrable"), "{text}");
    assert!(lines[2].ends_with(",non-integrable"), "{text}");
}

#[test]
fn residual_of_random_structure() {
    let (code, out) = run(&["residual", "--config", "almost-complex-T4"]);
    assert_eq!(code, 0);
    assert!(out.contains("verdict non-integrable"), "{out}");
}

#[test]
fn grad_check_tolerance_override() {
    assert_eq!(run(&["grad-check"]).0, 0);
    let (code, out) = run(&["grad-check", "--tolerance", "1e-14"]);
    assert_eq!(code, 1, "{out}");
}
