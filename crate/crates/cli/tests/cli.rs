use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 4] = ["--set", "synth.n_classes=2", "--set", "synth.images_per_class=20"];

fn aov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aov")).args(args).output().expect("aov runs")
}

fn aov_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aov")).current_dir(dir).args(args).envs(envs.iter().copied()).output().expect("aov runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

/// Exactly one JSON document on stdout.
fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let mut docs = serde_json::Deserializer::from_str(&text).into_iter::<Value>();
    let first = docs.next().expect("one document").expect("valid JSON");
    assert!(docs.next().is_none(), "more than one JSON document: {text}");
    first
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["d1", "d2"] {
        let out = aov_in(tmp.path(), &["synth", "--seed", "7", "--out", d], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (files_under(&tmp.path().join("d1")), files_under(&tmp.path().join("d2")));
    assert_eq!(a.len(), 1000 + 3);
    assert!(a == b, "directory contents differ");
    let other = aov_in(tmp.path(), &["synth", "--seed", "8", "--out", "d3"], &[]);
    assert!(other.status.success());
    assert_ne!(files_under(&tmp.path().join("d3")), a);
}

#[test]
fn train_score_eval_maps_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = vec!["synth", "--out", "d"];
    args.extend(SMALL);
    assert!(aov_in(dir, &args, &[]).status.success());

    let out = aov_in(dir, &["train", "--train", "d/train.jsonl", "--val", "d/heldout.jsonl", "--out", "m.aovc", "--json"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["steps"], 32);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resolved config"));

    let out = aov_in(dir, &["score", "--checkpoint", "m.aovc", "--bundle", "d/heldout/c0_0000.aovf", "--json"], &[]);
    assert!(out.status.success());
    let s = stdout_json(&out);
    let score = s["score"].as_f64().unwrap();
    assert!(score > 0.0 && score < 1.0);
    let adverb = s["adverb"].as_str().unwrap();
    assert!(["highly", "moderately", "slightly"].contains(&adverb));
    assert_eq!(s["text"], format!("with {adverb} suspicious feature:"));
    assert_eq!(s["n_original"], 128);
    assert_eq!(s["n_selected"], 8);

    let out = aov_in(dir, &["eval", "--checkpoint", "m.aovc", "--manifest", "d/heldout.jsonl", "--json", "--out", "eval.json"], &[]);
    assert!(out.status.success());
    let e = stdout_json(&out);
    assert_eq!(e["records"].as_array().unwrap().len(), 8);
    let saved: Value = serde_json::from_slice(&std::fs::read(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(saved, e);

    let out = aov_in(dir, &["maps", "--checkpoint", "m.aovc", "--manifest", "d/heldout.jsonl", "--out", "maps", "--json"], &[]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["maps"].as_array().unwrap().len(), 16);
    let pgm = std::fs::read(dir.join("maps/c0_0000_crop0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), 11 + 64);
}

#[test]
fn thread_cap_does_not_change_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = vec!["synth", "--out", "d"];
    args.extend(SMALL);
    assert!(aov_in(dir, &args, &[]).status.success());
    assert!(aov_in(dir, &["train", "--train", "d/train.jsonl", "--out", "m.aovc", "--epochs", "1"], &[]).status.success());
    let eval = |threads: &str| {
        let out = aov_in(dir, &["eval", "--checkpoint", "m.aovc", "--manifest", "d/heldout.jsonl", "--json"], &[("AOV_THREADS", threads)]);
        assert!(out.status.success());
        stdout_json(&out)
    };
    assert_eq!(eval("1"), eval("3"));
}

#[test]
fn eval_on_perfect_scores_is_one() {
    let out = aov(&["eval", "--manifest", &fixture("perfect_scores.jsonl"), "--json"]);
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert_eq!(r["auroc"]["mean"], 1.0);
    assert_eq!(r["auroc"]["pooled"], 1.0);
    assert!(r["detection"].is_null());
}

#[test]
fn eval_on_answers_reports_detection_and_rouge() {
    let out = aov(&["eval", "--manifest", &fixture("answers.jsonl"), "--json"]);
    assert!(out.status.success());
    let r = stdout_json(&out);
    let d = &r["detection"];
    assert_eq!((d["tp"].as_u64(), d["tn"].as_u64(), d["fn"].as_u64(), d["fp"].as_u64()), (Some(1), Some(1), Some(1), Some(0)));
    assert!(r["rouge_l"].as_f64().unwrap() > 0.0);
    assert!(r["auroc"].is_null());
}

#[test]
fn dedup_writes_survivors() {
    let tmp = tempfile::tempdir().unwrap();
    let out_path = tmp.path().join("kept.jsonl");
    let out = aov(&["dedup", "--items", &fixture("items.jsonl"), "--out", out_path.to_str().unwrap(), "--json"]);
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert_eq!(r["kept"], 3);
    assert_eq!(r["removed"]["bottle"], 1);
    assert_eq!(r["removed"]["screw"], 0);
    let kept = std::fs::read_to_string(out_path).unwrap();
    let ids: Vec<String> = kept.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(ids, ["a", "c", "d"]);
}

#[test]
fn exit_codes() {
    assert_eq!(aov(&["bogus"]).status.code(), Some(1));
    assert_eq!(aov(&["config", "--set", "train.nonsense=1"]).status.code(), Some(1));
    assert_eq!(aov(&["config", "--set", "synth.anomaly_fraction=1.5"]).status.code(), Some(1));
    assert_eq!(aov(&["synth"]).status.code(), Some(1));
    assert_eq!(aov(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(aov_in(dir, &["train", "--train", "missing.jsonl", "--out", "m.aovc"], &[]).status.code(), Some(2));
    std::fs::write(dir.join("junk.aovf"), b"NOPE").unwrap();
    let out = aov_in(dir, &["score", "--checkpoint", "junk.aovf", "--bundle", "junk.aovf", "--json"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["exit_code"], 2);

    let mut args = vec!["synth", "--out", "d"];
    args.extend(SMALL);
    assert!(aov_in(dir, &args, &[]).status.success());
    let out = aov_in(dir, &["train", "--train", "d/train.jsonl", "--out", "m.aovc", "--set", "train.lr0=1e30"], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = aov_in(dir, &["train", "--train", "d/train.jsonl", "--out", "m.aovc", "--set", "model.g=4"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_overrides_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, "heldout_fraction = 0.25\n[train]\nlr0 = 0.002\n").unwrap();
    let out = aov(&["config", "--config", path.to_str().unwrap(), "--set", "train.epochs=3", "--seed", "11", "--json"]);
    assert!(out.status.success());
    let c = stdout_json(&out);
    assert_eq!(c["heldout_fraction"], 0.25);
    assert_eq!(c["train"]["lr0"], 0.002);
    assert_eq!(c["train"]["epochs"], 3);
    assert_eq!(c["train"]["seed"], 11);
    assert_eq!(c["synth"]["seed"], 11);
    std::fs::write(&path, "[train]\nlearning_rate = 0.002\n").unwrap();
    assert_eq!(aov(&["config", "--config", path.to_str().unwrap()]).status.code(), Some(1));
}

fn schema_validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(include_str!("../report.schema.json")).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(report: &Value) {
    let v = schema_validator();
    let errors: Vec<String> = v.iter_errors(report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn desk_pipeline_meets_auroc_and_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aov_in(tmp.path(), &["pipeline", "--out", "p", "--json"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("p/report.json")).unwrap()).unwrap();
    assert_eq!(r, on_disk);
    assert_valid(&r);
    assert!(r["auroc"].as_f64().unwrap() >= 0.95, "auroc {}", r["auroc"]);
    assert_eq!(r["loss_curve"].as_array().unwrap().len(), 800);
    for m in r["maps"].as_array().unwrap() {
        assert!(tmp.path().join("p").join(m.as_str().unwrap()).is_file());
    }
    assert!(tmp.path().join("p/model.aovc").is_file());
}

#[test]
fn untrained_pipeline_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aov_in(tmp.path(), &["pipeline", "--epochs", "0", "--out", "p", "--json"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_valid(&r);
    let auroc = r["auroc"].as_f64().unwrap();
    assert!(auroc > 0.3 && auroc < 0.7, "auroc {auroc}");
    assert!(r["loss_curve"].as_array().unwrap().is_empty());
}

#[test]
fn schema_rejects_malformed_reports() {
    let v = schema_validator();
    assert!(!v.is_valid(&serde_json::json!({ "auroc": 0.9 })));
    let tmp = tempfile::tempdir().unwrap();
    let out = aov_in(tmp.path(), &["pipeline", "--epochs", "0", "--out", "p", "--json", "--set", "synth.images_per_class=20"], &[]);
    assert!(out.status.success());
    let mut r = stdout_json(&out);
    assert!(v.is_valid(&r));
    r["auroc"] = serde_json::json!(1.5);
    assert!(!v.is_valid(&r));
    r["auroc"] = serde_json::json!(0.5);
    r["extra"] = serde_json::json!(true);
    assert!(!v.is_valid(&r));
}

#[test]
fn pipeline_stage_failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aov_in(tmp.path(), &["pipeline", "--out", "p", "--set", "train.lr0=1e30", "--set", "synth.images_per_class=20", "--json"], &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout_json(&out)["error"].as_str().unwrap().starts_with("stage train:"));
}
