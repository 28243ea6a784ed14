use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 12] = [
    "--train-per-class",
    "1",
    "--val-per-class",
    "1",
    "--test-per-class",
    "1",
    "--recognizer-dim",
    "16",
    "--recognizer-ffn-dim",
    "32",
    "--estimator-dim",
    "16",
];

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egoaction"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen(cwd: &Path, out: &str) {
    let mut args = vec!["gen-data", "--seed", "7", "--out", out];
    args.extend(TINY);
    let o = run(cwd, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "a");
    gen(t.path(), "b");
    let a = tree(&t.path().join("a"));
    assert_eq!(a.len(), 2 + 24);
    assert_eq!(a, tree(&t.path().join("b")));
    assert_eq!(entries(t.path()), ["a", "b"]);
}

#[test]
fn config_echo_and_precedence() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), r#"{"seed": 3, "epochs": 9}"#).unwrap();
    let o = run(
        t.path(),
        &["gen-data", "--config", "c.json", "--epochs", "4", "--out", "d", "--sampler-train", "uniform"],
    );
    assert!(o.status.success());
    let first = String::from_utf8(o.stdout).unwrap();
    let echoed: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["epochs"], 4);
    assert_eq!(echoed["sampler_train"], "uniform");
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("d/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 3);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["gen-data", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = run(t.path(), &["gen-data", "--batch-size", "2", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = run(t.path(), &["gen-data", "--epochs", "many", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(t.path(), &["train-action", "--data", "missing", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(t.path(), &["gen-data", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(t.path(), &["ablate-sampling", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(entries(t.path()).is_empty());
}

#[test]
fn ablation_writes_twelve_rows() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d");
    let mut args = vec!["ablate-sampling", "--data", "d", "--seeds", "1,2,3", "--out", "abl", "--epochs", "1"];
    args.extend(&TINY[6..10]);
    let o = run(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(t.path().join("abl/ablation.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 13);
    assert!(lines[0].starts_with("arm\tsampler_train\tsampler_test\tframes"));
    let arms: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(arms, ["1", "1", "1", "2", "2", "2", "3", "3", "3", "4", "4", "4"]);
    assert_eq!(entries(t.path()), ["abl", "d"]);
}

#[test]
fn full_pipeline_outputs() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d");
    let est_args = [
        "--estimator-epochs",
        "1",
        "--estimator-lr-drop-epoch",
        "1",
        "--estimator-frames-per-video",
        "1",
        "--estimator-eval-frames",
        "2",
    ];
    let mut args = vec!["train-keypoints", "--data", "d", "--out", "est"];
    args.extend(&TINY[10..]);
    args.extend(est_args);
    let o = run(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(entries(&t.path().join("est")), ["best.ckpt", "config.json", "log.jsonl", "timing.jsonl"]);

    let mut args = vec!["predict", "--data", "d", "--config", "est/config.json", "--checkpoint", "est/best.ckpt"];
    args.extend(["--out", "pred", "--split", "val"]);
    let o = run(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let jsonl = fs::read_to_string(t.path().join("pred/predictions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    for role in ["left", "right", "object"] {
        assert_eq!(first[role].as_array().unwrap().len(), 63);
        let c = first["confidence"][role].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&c));
    }
    assert_eq!(first["frame"], 0);
    assert!(first["object_class"].as_u64().unwrap() < 4);

    let mut args = vec!["train-action", "--data", "d", "--config", "est/config.json", "--out", "rec"];
    args.extend(["--epochs", "1", "--pose-source", "estimator", "--estimator-checkpoint", "est/best.ckpt"]);
    args.extend(&TINY[6..10]);
    let o = run(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let common = [
        "--data",
        "d",
        "--config",
        "rec/config.json",
        "--checkpoint",
        "rec/best.ckpt",
        "--pose-source",
        "estimator",
        "--estimator-checkpoint",
        "est/best.ckpt",
    ];
    let mut args = vec!["classify", "--out", "cls"];
    args.extend(common);
    let o = run(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(t.path().join("cls/predictions.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 8);
    assert_eq!(tsv.lines().next().unwrap(), "video_id\tpredicted\ttrue\tmargin");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("cls/summary.json")).unwrap()).unwrap();
    let confusion = summary["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 8);
    let total: u64 = confusion.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 8);

    let mut args = vec!["eval", "--out", "ev"];
    args.extend(common);
    let o = run(t.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("ev/eval.json")).unwrap()).unwrap();
    assert!(ev["pose"]["model_mpjpe"].as_f64().unwrap() > 0.0);
    assert_eq!(ev["action"]["top1"], summary["top1"]);

    assert_eq!(entries(t.path()), ["cls", "d", "est", "ev", "pred", "rec"]);
}

#[test]
fn wrong_checkpoint_config_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "d");
    let mut args = vec!["train-action", "--data", "d", "--out", "rec", "--epochs", "1"];
    args.extend(&TINY[6..10]);
    assert!(run(t.path(), &args).status.success());
    let args = ["classify", "--data", "d", "--checkpoint", "rec/best.ckpt", "--recognizer-dim", "32", "--out", "cls"];
    let o = run(t.path(), &args);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["selftest"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    let lines: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l.starts_with("PASS")));
    assert!(entries(t.path()).is_empty());
}
