use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn imbacon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imbacon"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

const TINY: &str = r#"{"data": {"n": 40, "rho": 0.25}, "optim": {"epochs": 3, "batch_size": 8}}"#;

#[test]
fn metrics_on_hand_written_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("e.csv"),
        "view_id,sample_id,label,z0,z1\n0,0,0,1.0,0.0\n1,0,0,0.8,0.6\n2,1,1,-1.0,0.0\n3,1,1,0.0,1.0\n",
    )
    .unwrap();
    fs::write(dir.path().join("m.json"), r#"{"embeddings": "e.csv"}"#).unwrap();
    let out = imbacon(dir.path(), &["metrics", "--config", "m.json"]);
    assert!(out.status.success());
    let r = json(&out);
    // Pair distances sqrt(0.4) and sqrt(2). Only view 3 fails: view 0 is a
    // negative at distance sqrt(2), tying its partner.
    let sad = (0.4f64.sqrt() + 2f64.sqrt()) / 2.0;
    assert!((r["sad"].as_f64().unwrap() - sad).abs() < 1e-12);
    assert_eq!(r["saa"].as_f64().unwrap(), 0.75);
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = imbacon(dir.path(), &["train", "--config", "c.json", "--out", "runs/"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let id = json(&out)["run_id"].as_str().unwrap().to_string();
    let run = dir.path().join("runs").join(&id);
    for f in ["record.json", "metrics.json", "embeddings.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let record: serde_json::Value = serde_json::from_slice(&fs::read(run.join("record.json")).unwrap()).unwrap();
    assert_eq!(record["run_id"], id.as_str());
    assert_eq!(record["epochs"].as_array().unwrap().len(), 3);

    let csv = fs::read_to_string(run.join("embeddings.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("view_id,sample_id,label,z0,z1,"));
    assert!(!csv.contains('\r'));
    for line in lines {
        let z: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        let n: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn seed_flag_changes_run_id() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let a = json(&imbacon(dir.path(), &["train", "--config", "c.json", "--seed", "1"]));
    let b = json(&imbacon(dir.path(), &["train", "--config", "c.json", "--seed", "2"]));
    assert_ne!(a["run_id"], b["run_id"]);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.json"), r#"{"optim": {"epoch": 3}}"#).unwrap();
    fs::write(dir.path().join("nested.json"), r#"{"loss": {"temperature": 0.1}}"#).unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"data": {"n": 40}, "optim": {"batch_size": 64}}"#).unwrap();
    for args in [
        vec!["train", "--config", "missing.json"],
        vec!["train", "--config", "typo.json"],
        vec!["train", "--config", "nested.json"],
        vec!["train", "--config", "bad.json"],
        vec!["sweep", "--config", "bad.json"],
        vec!["sweep", "--axis", "colour", "--values", "1"],
        vec!["frobnicate"],
    ] {
        assert_eq!(imbacon(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn verify_bound_passes_at_near_collapsed_init() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = imbacon(dir.path(), &["verify-bound", "--config", "c.json", "--batches", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["failed"], 0);
}

#[test]
fn sweep_resumes_and_correlates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let args = [
        "sweep", "--config", "c.json", "--out", "s", "--axis", "temperature", "--values", "0.1,0.5",
        "--seeds", "0,1,2,3",
    ];
    let first = imbacon(dir.path(), &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let summary = json(&first);
    assert_eq!(summary["resumed"], 0);
    assert_eq!(summary["groups"].as_array().unwrap().len(), 2);

    let csv = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert!(csv.starts_with(
        "run_id,loss,imbalance,tau,batch_size,theta_maj,seed,sad,saa,cad,cac,gpu,probe_metric\n"
    ));
    assert_eq!(csv.lines().count(), 9);

    let again = json(&imbacon(dir.path(), &args));
    assert_eq!(again["resumed"], 8);
    assert_eq!(fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap(), csv);

    let out = imbacon(dir.path(), &["correlate", "--out", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["rows"], 8);
    assert!(dir.path().join("s/correlation.json").exists());
}

#[test]
fn correlate_needs_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let sweep = imbacon(
        dir.path(),
        &["sweep", "--config", "c.json", "--out", "s", "--axis", "imbalance", "--values", "0.25", "--seeds", "0,1"],
    );
    assert!(sweep.status.success());
    let out = imbacon(dir.path(), &["correlate", "--out", "s"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient data"));
}

#[test]
fn gen_data_and_export_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = imbacon(dir.path(), &["gen-data", "--config", "c.json", "--out", "d"]);
    assert!(out.status.success());
    assert_eq!(json(&out)["minority"], 10);
    let data = fs::read_to_string(dir.path().join("d/dataset.csv")).unwrap();
    assert_eq!(data.lines().count(), 41);

    let out = imbacon(
        dir.path(),
        &["export-embeddings", "--config", "c.json", "--epochs", "1", "--file", "mid.csv", "--quiet"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let csv = fs::read_to_string(dir.path().join("mid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 81);
}

#[test]
fn probe_on_exported_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = imbacon(dir.path(), &["export-embeddings", "--config", "c.json", "--file", "e.csv"]);
    assert!(out.status.success());
    let out = imbacon(dir.path(), &["probe", "--train", "e.csv", "--test", "e.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    let ba = r["balanced_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ba));
}
