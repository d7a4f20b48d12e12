use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(dir: &Path, args: &[&str], config: &Value) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config.to_string()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_linkgnn"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train() -> Value {
    json!({
        "epochs": 3,
        "batch_size": 4,
        "n_train_samples": 8,
        "n_test_samples": 4,
        "size_distribution": [[4, 2], [2, 1]],
        "seed": 2
    })
}

fn small_model() -> Value {
    json!({"hidden_dim": 8, "n_layers": 1})
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let out = out.to_str().unwrap();
    let cfg = json!({"train": small_train()});
    let first = run(dir.path(), &["gen-data", "--out", out], &cfg);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(
        fs::read_dir(dir.path().join("data/instances"))
            .unwrap()
            .count(),
        8
    );
    let again = run(dir.path(), &["gen-data", "--out", out], &cfg);
    assert_eq!(stdout(&first), stdout(&again));
    assert!(stdout(&first).contains("manifest hash"));

    let empty = json!({"train": {"n_train_samples": 0, "batch_size": 1}});
    assert_eq!(
        run(dir.path(), &["gen-data", "--out", out], &empty)
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data"], &json!({"train": {"epoch": 3}}));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn train_writes_log_and_reproduces_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = json!({"train": small_train()});
    assert!(run(
        dir.path(),
        &["gen-data", "--out", data.to_str().unwrap()],
        &cfg
    )
    .status
    .success());

    let cfg = json!({"train": small_train(), "model": small_model(), "dataset": data});
    let hashes: Vec<String> = (0..2)
        .map(|k| {
            let out = dir.path().join(format!("run{k}"));
            let o = run(dir.path(), &["train", "--out", out.to_str().unwrap()], &cfg);
            assert!(o.status.success(), "{}", stderr(&o));
            let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
            assert!(log.starts_with("epoch,train_obj,test_obj,seconds\n"));
            assert_eq!(log.lines().count(), 1 + 3);
            assert!(out.join("model.json").is_file());
            stdout(&o)
                .lines()
                .find(|l| l.starts_with("model hash"))
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);

    let missing = json!({"train": small_train(), "dataset": dir.path().join("nowhere")});
    assert_eq!(
        run(
            dir.path(),
            &["train", "--out", dir.path().to_str().unwrap()],
            &missing
        )
        .status
        .code(),
        Some(1)
    );

    let mut sup = small_train();
    sup["method"] = json!("supervised");
    let o = run(
        dir.path(),
        &["train", "--out", dir.path().to_str().unwrap()],
        &json!({"train": sup}),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ga"));
}

#[test]
fn eval_and_sweep_use_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trained");
    let cfg = json!({"train": small_train(), "model": small_model()});
    assert!(
        run(dir.path(), &["train", "--out", out.to_str().unwrap()], &cfg)
            .status
            .success()
    );
    let model = out.join("model.json");

    let cfg = json!({"train": small_train(), "eval": {"model": model}});
    let o = run(
        dir.path(),
        &["eval", "--out", dir.path().join("eval").to_str().unwrap()],
        &cfg,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean delay"));

    let sweep = json!({
        "sweep": {"instances_per_size": 2, "methods": ["lognn", "random"]},
        "artifacts": {"lognn": model}
    });
    let sweep_out = dir.path().join("sweep");
    let o = run(
        dir.path(),
        &[
            "sweep",
            "--desk-scale",
            "--out",
            sweep_out.to_str().unwrap(),
        ],
        &sweep,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,M,N,seed,mean_delay,mean_inference_seconds,mean_delay_plus_inference"
    );
    let ms: Vec<&str> = lines
        .filter(|l| l.starts_with("lognn"))
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ms, vec!["2", "4", "8", "10"]);

    let broken = json!({
        "sweep": {"server_counts": [2], "instances_per_size": 1, "methods": ["lognn"]},
        "artifacts": {"lognn": dir.path().join("absent.json")}
    });
    let o = run(
        dir.path(),
        &["sweep", "--out", sweep_out.to_str().unwrap()],
        &broken,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lognn"));

    let no_model =
        json!({"sweep": {"server_counts": [2], "instances_per_size": 1, "methods": ["mlp_tr"]}});
    let o = run(
        dir.path(),
        &["sweep", "--out", sweep_out.to_str().unwrap()],
        &no_model,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mlp_tr"));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let dir = tempfile::tempdir().unwrap();
    let base = json!({"instances": 2, "hidden_dim": 6, "n_layers": 1});
    let o = run(
        dir.path(),
        &["gradcheck", "--out", dir.path().to_str().unwrap()],
        &json!({"gradcheck": base}),
    );
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("max rel error"));

    let mut broken = base.clone();
    broken["fault"] = json!("leaky_relu");
    let o = run(
        dir.path(),
        &["gradcheck", "--out", dir.path().to_str().unwrap()],
        &json!({"gradcheck": broken}),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("leaky_relu"), "{}", stderr(&o));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() > 1e-4);
}

#[test]
fn bench_writes_six_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"bench": {
        "train": {"epochs": 2, "batch_size": 4, "n_train_samples": 8, "n_test_samples": 4, "size_distribution": [[2, 1]]},
        "ga": {"population": 6, "generations": 2},
        "hidden_dim": 6,
        "n_layers": 1
    }});
    let o = run(
        dir.path(),
        &["bench", "--out", dir.path().to_str().unwrap()],
        &cfg,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    assert_eq!(stdout(&o).lines().count(), 1 + 6);
}
