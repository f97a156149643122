use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "synth": {"n_users": 50, "n_items": 40, "k_range": [10, 25]},
  "data": {"k_core": 3},
  "train": {"max_epochs": 2, "batch_size": 16, "encoder": {"repr_dim": 8, "hidden_dim": 8}},
  "grid": {"learning_rate": [0.001, 0.005], "l2_weight": [0.01], "dropout": [0.0, 0.2]}
}"#;

fn cngcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cngcf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cngcf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config and a seed-7 dump; returns (config path, dump dir).
fn fixture(root: &Path) -> (String, String) {
    let cfg = root.join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(&["synth", "--seed", "7", "--out", s(&data), "--config", s(&cfg)]);
    (s(&cfg).to_owned(), s(&data).to_owned())
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, a) = fixture(dir.path());
    let b = dir.path().join("again");
    ok(&["synth", "--seed", "7", "--out", s(&b), "--config", &cfg]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in names {
        let x = fs::read(Path::new(&a).join(&n)).unwrap();
        let y = fs::read(b.join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}

#[test]
fn train_then_evaluate_reports_requested_ks() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--config", &cfg, "--out", s(&run)]);
    for f in ["config.json", "training_log.csv", "best/manifest.json", "last/optimizer.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,elbo_clean,elbo_cf,kl,recon,total,val_precision@10\n"));
    assert_eq!(log.lines().count(), 3);

    let ev = dir.path().join("eval");
    let table = ok(&["evaluate", "--ckpt", s(&run.join("best")), "--k", "10", "--k", "20", "--out", s(&ev)]);
    assert!(table.contains("precision"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ks"], serde_json::json!([10, 20]));
    for k in ["10", "20"] {
        for m in ["precision", "recall", "ndcg"] {
            let v = report["metrics"][k][m].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn rerun_from_copied_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(dir.path());
    let first = dir.path().join("first");
    ok(&["train", "--data", &data, "--config", &cfg, "--out", s(&first), "--seed", "3"]);
    let second = dir.path().join("second");
    let copied = first.join("config.json");
    ok(&["train", "--data", &data, "--config", s(&copied), "--out", s(&second)]);
    assert_eq!(
        fs::read(first.join("training_log.csv")).unwrap(),
        fs::read(second.join("training_log.csv")).unwrap()
    );
    for f in ["manifest.json", "optimizer.bin"] {
        assert_eq!(
            fs::read(first.join("best").join(f)).unwrap(),
            fs::read(second.join("best").join(f)).unwrap()
        );
    }
}

#[test]
fn resuming_a_finished_run_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", &data, "--config", &cfg, "--out", s(&run)]);
    let log = fs::read(run.join("training_log.csv")).unwrap();
    let params = fs::read(run.join("last/optimizer.bin")).unwrap();
    ok(&["train", "--data", &data, "--config", &cfg, "--out", s(&run), "--resume"]);
    assert_eq!(fs::read(run.join("training_log.csv")).unwrap(), log);
    assert_eq!(fs::read(run.join("last/optimizer.bin")).unwrap(), params);
}

#[test]
fn ingest_keeps_ratings_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir(&raw).unwrap();
    fs::write(
        raw.join("interactions.csv"),
        "user_id,item_id,rating\nu1,a,2.0\nu1,b,3.0\nu2,a,4.5\nu2,b,5,1700000000\n",
    )
    .unwrap();
    let out = dir.path().join("dump");
    let msg = ok(&["ingest", "--data", s(&raw), "--out", s(&out)]);
    assert!(msg.contains("2 positive interactions"), "{msg}");
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["n_interactions"], 2);
    assert_eq!(m["source_rating_threshold"], 3.0);
}

#[test]
fn gridsearch_and_ablate_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(dir.path());
    let g = dir.path().join("grid");
    ok(&["gridsearch", "--data", &data, "--config", &cfg, "--out", s(&g), "--jobs", "2"]);
    let grid = fs::read_to_string(g.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
    assert!(g.join("best_config.json").exists());

    let a = dir.path().join("ablate");
    ok(&["ablate", "--data", &data, "--config", &cfg, "--out", s(&a), "--jobs", "3", "--k", "10"]);
    let table = fs::read_to_string(a.join("ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_causal_messages", "no_counterfactual", "gcn_encoder", "mf_baseline"]);
}

#[test]
fn sweep_embedding_size_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = fixture(dir.path());
    let cfg = dir.path().join("sweep.json");
    fs::write(&cfg, TINY.replacen('{', r#"{"sweep": {"embedding_size": [4, 8]},"#, 1)).unwrap();
    let out = dir.path().join("sw");
    ok(&["sweep", "--axis", "embedding-size", "--data", &data, "--config", s(&cfg), "--out", s(&out), "--jobs", "2"]);
    let csv = fs::read_to_string(out.join("sweep_embedding_size.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,precision@10,recall@10,ndcg@10");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("4,") && lines[2].starts_with("8,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cngcf(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(cngcf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cngcf(&["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"lambda": 1.5}}"#).unwrap();
    let out = cngcf(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda") && err.contains("[0, 1]"), "{err}");

    let missing = cngcf(&["evaluate", "--ckpt", s(&dir.path().join("nowhere"))]);
    assert_eq!(missing.status.code(), Some(2));

    let out = cngcf(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_is_echoed_with_defaults_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"n_users": 30, "n_items": 30, "k_range": [10, 20]}}"#).unwrap();
    let out = dir.path().join("s");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out), "--seed", "2"]);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["patience"], 20);
    assert_eq!(echoed["seed"], 2);
    assert_eq!(echoed["synth"]["seed"], 2);
}
