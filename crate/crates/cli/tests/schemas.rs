// Copyright 2026 The warmswap Authors.
// SPDX-License-Identifier: Apache-2.0

//! Every JSON file the CLI writes validates against the schemas in docs/.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde_json::Value;

fn docs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs")
}

fn load(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap())
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn check(schema: &str, instance: &Value) {
    let schema = load(&docs().join("schemas").join(schema));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| format!("{e} at {}", e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{errors:#?}\n{instance:#}");
}

fn warmswap(args: &[&str], dir: &Path) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_warmswap"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o.stdout
}

#[test]
fn shipped_documents_validate() {
    let d = docs();
    check("cost_model.schema.json", &load(&d.join("cost_model.json")));
    check(
        "function_profile.schema.json",
        &load(&d.join("profiles.json")),
    );
    check(
        "calibration.schema.json",
        &load(&d.join("calibration.json")),
    );
}

#[test]
fn shipped_documents_match_calibration() {
    let dir = tempfile::tempdir().unwrap();
    warmswap(&["calibrate", "--out-dir", "cal"], dir.path());
    for name in ["cost_model.json", "profiles.json", "calibration.json"] {
        assert_eq!(
            load(&dir.path().join("cal").join(name)),
            load(&docs().join(name)),
            "docs/{name} is stale; regenerate with `warmswap calibrate --out-dir docs`"
        );
    }
}

#[test]
fn simulation_outputs_validate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let config = serde_json::json!({
        "profiles": docs().join("profiles.json"),
        "cost": docs().join("cost_model.json"),
        "synthetic": {"rate_per_minute": 0.1, "horizon_minutes": 300},
        "strategy": "warmswap-bulk",
        "keep_alive_minutes": 15,
        "seed": 2,
        "output_dir": "out"
    });
    check("experiment_config.schema.json", &config);
    fs::write(p.join("exp.json"), config.to_string()).unwrap();
    warmswap(&["simulate", "--config", "exp.json", "--compare"], p);
    check(
        "simulation_report.schema.json",
        &load(&p.join("out/report.json")),
    );
    check(
        "comparison.schema.json",
        &load(&p.join("out/comparison.json")),
    );
}

#[test]
fn analysis_validates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("rates.csv"), "lambda\n0.01\n0.02\n0.5\n").unwrap();
    fs::write(
        p.join("t.csv"),
        "function_id,timestamp_minutes\nf,1\nf,40\n",
    )
    .unwrap();
    let out = warmswap(
        &[
            "analyze",
            "--lambda",
            "0.001",
            "--trace",
            "t.csv",
            "--histogram",
            "rates.csv",
            "--benefit",
            "2",
            "--cost",
            "1",
        ],
        p,
    );
    check(
        "analysis.schema.json",
        &serde_json::from_slice(&out).unwrap(),
    );
}

#[test]
fn migration_outputs_validate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let spec = serde_json::json!({
        "dep_label": "py",
        "segments": [
            {"base_page_id": 0, "size_bytes": 20000, "permission": "read-write"},
            {"base_page_id": 10, "size_bytes": 4096, "permission": "execute"}
        ],
        "files": [{"fd": 0, "path": "/usr/lib/libpython.so", "kind": "regular"}],
        "content_seed": 1
    });
    check("process_spec.schema.json", &spec);
    let env = serde_json::json!({"files": {"/usr/lib/libpython.so": "3.11"}});
    check("environment_manifest.schema.json", &env);
    fs::write(p.join("spec.json"), spec.to_string()).unwrap();
    fs::write(p.join("env.json"), env.to_string()).unwrap();
    fs::write(p.join("trace.csv"), "page_id,compute_us\n0,10\n10,0\n4,0\n").unwrap();
    warmswap(&["dump", "--spec", "spec.json", "--out", "py.ckpt"], p);

    let mut server = Command::new(env!("CARGO_BIN_EXE_warmswap"))
        .args([
            "serve",
            "py.ckpt",
            "--listen",
            "127.0.0.1:0",
            "--stats-out",
            "stats.json",
        ])
        .current_dir(p)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();
    for policy in ["lazy", "bulk", "eager"] {
        let out = warmswap(
            &[
                "run",
                "--connect",
                &addr,
                "--label",
                "py",
                "--policy",
                policy,
                "--trace",
                "trace.csv",
                "--env",
                "env.json",
                "--again",
            ],
            p,
        );
        check(
            "execution_report.schema.json",
            &serde_json::from_slice(&out).unwrap(),
        );
    }
    let out = warmswap(
        &[
            "run",
            "--checkpoint",
            "py.ckpt",
            "--trace",
            "trace.csv",
            "--env",
            "env.json",
        ],
        p,
    );
    check(
        "execution_report.schema.json",
        &serde_json::from_slice(&out).unwrap(),
    );

    Command::new("kill")
        .args(["-INT", &server.id().to_string()])
        .status()
        .unwrap();
    assert!(server.wait().unwrap().success());
    check("serve_stats.schema.json", &load(&p.join("stats.json")));
}

#[test]
fn schemas_reject_malformed_documents() {
    let schema = load(&docs().join("schemas/cost_model.schema.json"));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let mut cost = load(&docs().join("cost_model.json"));
    assert!(validator.is_valid(&cost));
    cost["per_fault_rtt_ms"] = Value::from(-1.0);
    assert!(!validator.is_valid(&cost));
    cost.as_object_mut().unwrap().remove("per_fault_rtt_ms");
    assert!(!validator.is_valid(&cost));
}
