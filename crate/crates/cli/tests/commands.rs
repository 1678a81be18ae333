use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn taskvec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskvec")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, name: &str, config: &str) -> std::path::PathBuf {
    let cfg = write(dir, &format!("{name}.json"), config);
    let out = dir.join(name);
    let o = taskvec(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    out
}

fn result(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("result.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_outputs_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"preset": "desk", "epochs": 2}"#;
    let a = train(tmp.path(), "a", cfg);
    for f in ["pool.json", "pool.bin", "metrics.csv", "result.json", "train.log"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let r = result(&a);
    let fa = r["fa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&fa));
    assert!(r["risk"].as_array().unwrap().len() == 5);
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("after_task,eval_task,accuracy\n"));
    assert_eq!(csv.lines().count(), 1 + 15);

    let b = train(tmp.path(), "b", cfg);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("pool.bin")).unwrap(), fs::read(b.join("pool.bin")).unwrap());
}

#[test]
fn ita_beats_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let ita = result(&train(tmp.path(), "ita", r#"{"preset": "desk"}"#));
    let ft = result(&train(tmp.path(), "ft", r#"{"preset": "desk", "algo": "finetune"}"#));
    assert!(ita["fa"].as_f64().unwrap() > ft["fa"].as_f64().unwrap());
}

#[test]
fn edit_and_eval_on_a_trained_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", r#"{"preset": "desk"}"#);
    let pool = run.join("pool.json");
    let ds = write(tmp.path(), "ds.json", r#"{"kind": "blobs", "params": {}}"#);

    let ev = json(&taskvec(&["eval", "--pool", s(&pool), "--dataset", s(&ds)]));
    let fa = result(&run)["fa"].as_f64().unwrap();
    assert!((ev["overall"].as_f64().unwrap() - fa).abs() <= 1e-12);
    assert_eq!(ev["per_task"].as_array().unwrap().len(), 5);

    // A run config works as the dataset argument too.
    let ev2 = json(&taskvec(&["eval", "--pool", s(&pool), "--dataset", s(&tmp.path().join("run.json"))]));
    assert_eq!(ev, ev2);

    let edited = tmp.path().join("all.json");
    let all = json(&taskvec(&[
        "edit", "--pool", s(&pool), "--specialize", "1,2,3,4,5", "--eval", s(&ds), "--out", s(&edited),
    ]));
    assert!(edited.exists());
    assert!((all["fa_tgt"].as_f64().unwrap() - all["full_fa_tgt"].as_f64().unwrap()).abs() <= 1e-12);
    assert!(all["fa_ctrl"].is_null());

    let un = json(&taskvec(&["edit", "--pool", s(&pool), "--unlearn", "1", "--eval", s(&ds)]));
    assert!(un["fa_tgt"].as_f64().unwrap() <= un["full_fa_tgt"].as_f64().unwrap());
    assert!(run.join("edited.json").exists());

    let last = json(&taskvec(&["edit", "--pool", s(&pool), "--specialize", "5", "--eval", s(&ds)]));
    assert!(last["fa_tgt"].as_f64().unwrap() >= last["full_fa_tgt"].as_f64().unwrap());

    let raw = json(&taskvec(&["edit", "--pool", s(&pool), "--unlearn", "2", "--raw"]));
    assert!(raw["fa_tgt"].is_null());

    let bad = taskvec(&["edit", "--pool", s(&pool), "--unlearn", "6"]);
    assert_eq!(bad.status.code(), Some(2));

    let wrong_dim = write(tmp.path(), "wd.json", r#"{"kind": "blobs", "params": {"dim": 5}}"#);
    assert_eq!(taskvec(&["eval", "--pool", s(&pool), "--dataset", s(&wrong_dim)]).status.code(), Some(2));
    let wrong_tasks = write(tmp.path(), "wt.json", r#"{"kind": "blobs", "params": {"tasks": 4}}"#);
    assert_eq!(taskvec(&["eval", "--pool", s(&pool), "--dataset", s(&wrong_tasks)]).status.code(), Some(2));
}

#[test]
fn base_only_pool_evaluates_near_probe_level() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "run", r#"{"preset": "desk"}"#);
    let file = taskvec::io::load_pool(&run.join("pool.json")).unwrap();
    let base = tmp.path().join("base.json");
    taskvec::io::save_params(&base, &file.network, file.pool.theta0()).unwrap();
    let ds = write(tmp.path(), "ds.json", r#"{"kind": "blobs", "params": {}}"#);
    let ev = json(&taskvec(&["eval", "--pool", s(&base), "--dataset", s(&ds)]));
    assert_eq!(ev["vectors"], 0);
    let probe = result(&run)["probe_acc"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum::<f64>() / 5.0;
    assert!(ev["overall"].as_f64().unwrap() >= probe - 0.1, "{} vs probe {probe}", ev["overall"]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = write(tmp.path(), "ds.json", r#"{"kind": "blobs", "params": {}}"#);
    let missing = tmp.path().join("nope.json");
    assert_eq!(taskvec(&["eval", "--pool", s(&missing), "--dataset", s(&ds)]).status.code(), Some(2));

    let unknown = write(tmp.path(), "u.json", r#"{"learning_rate": 1}"#);
    let o = taskvec(&["train", "--config", s(&unknown), "--out", s(&tmp.path().join("u"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!tmp.path().join("u").exists());

    let no_out = write(tmp.path(), "n.json", "{}");
    assert_eq!(taskvec(&["train", "--config", s(&no_out)]).status.code(), Some(2));

    let blowup = write(tmp.path(), "b.json", r#"{"preset": "desk", "lr": 1e300, "epochs": 1, "dataset": {"kind": "blobs", "params": {"tasks": 2}}}"#);
    let o = taskvec(&["train", "--config", s(&blowup), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(taskvec(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(taskvec(&["edit", "--pool", "x"]).status.code(), Some(2));
}

#[test]
fn verify_prints_residuals() {
    let o = taskvec(&["verify", "--suite", "jensen", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS jensen-gap-psd")));
    assert!(text.lines().filter(|l| l.trim_start().starts_with("jensen-gap-psd #")).count() == 100);
}

#[test]
fn verify_failures_name_the_worst_seed() {
    let mut r = taskvec::verify::run_suite(taskvec::verify::Suite::Theorem1, 0).unwrap();
    r[0].pass = false;
    let e = taskvec_cli::verify_outcome(&r).unwrap_err();
    assert_eq!(e.code, 1);
    assert!(e.message.contains(&format!("worst seed {}", r[0].worst_seed)));
}
