use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
n_enc_layers = 1
n_dec_layers = 1
n_heads = 2
d_model = 8
d_ffn = 16
vocab_size = 12
max_len = 8

[train]
epochs = 2
batch_size = 8
learning_rate = 0.005
warmup_steps = 4
seed = 3

[data]
train_pairs = 40
valid_pairs = 8
test_pairs = 8
min_len = 2
max_len = 5
seed = 1
"#;

fn a2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_teacher(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let o = a2d(&["train-teacher", "--config", s(cfg), "--data", "synth:copy", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn missing_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = a2d(&["train-teacher", "--config", s(&cfg), "--data", "synth:copy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("seed = 3", "seed = 3\nlearning_rat = 1"));
    let out = dir.path().join("o");
    let o = a2d(&["train-teacher", "--config", s(&cfg), "--data", "synth:copy", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
    assert!(!out.exists());
}

#[test]
fn training_is_deterministic_and_stays_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = train_teacher(dir.path(), &cfg, "a");
    let b = train_teacher(dir.path(), &cfg, "b");
    let last = |d: &Path| fs::read_to_string(d.join("metrics.ndjson")).unwrap().lines().last().unwrap().to_string();
    assert_eq!(last(&a), last(&b));
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["config.toml", "metrics.ndjson", "model.ckpt"]);
    let mut top: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["a", "b", "exp.toml"]);
}

#[test]
fn distill_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let teacher = train_teacher(dir.path(), &cfg, "teacher");
    let student = dir.path().join("student");
    let o = a2d(&[
        "distill",
        "--config",
        s(&cfg),
        "--data",
        "synth:copy",
        "--teacher",
        s(&teacher.join("model.ckpt")),
        "--out",
        s(&student),
        "--parts",
        "enc,dec-self",
        "--lambda",
        "1",
        "--mu",
        "1",
        "--lambda-decay",
        "0.9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(student.join("metrics.ndjson")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(log.lines().nth(1).unwrap()).unwrap();
    assert!((rec["lambda"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(rec["l_att_dec_cross"].as_f64().unwrap(), 0.0);

    let o = a2d(&["eval", "--checkpoint", s(&student.join("model.ckpt")), "--data", "synth:copy", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["bleu"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["sentences"].as_u64(), Some(8));

    let csvs = dir.path().join("csv");
    let o = a2d(&["export-aam", "--checkpoint", s(&student.join("model.ckpt")), "--out", s(&csvs)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dec_cross"));
    assert!(!csvs.join("dec_cross.csv").exists());
    let enc = fs::read_to_string(csvs.join("enc_self.csv")).unwrap();
    let lines: Vec<&str> = enc.lines().collect();
    // Teacher here has 1 layer x 2 heads, student the same.
    assert_eq!(lines[0], ",s0.0,s0.1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("t0.0,"));

    let o = a2d(&["export-aam", "--checkpoint", s(&teacher.join("model.ckpt")), "--out", s(&csvs)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_rejects_bad_magic_and_empty_data() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("x.ckpt");
    fs::write(&bogus, b"definitely not a checkpoint").unwrap();
    let o = a2d(&["eval", "--checkpoint", s(&bogus), "--data", "synth:copy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let cfg = write_config(dir.path(), TINY);
    let teacher = train_teacher(dir.path(), &cfg, "t");
    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let o = a2d(&["eval", "--checkpoint", s(&teacher.join("model.ckpt")), "--data", s(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
}

#[test]
fn distill_rejects_vocab_mismatch_and_empty_parts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let teacher = train_teacher(dir.path(), &cfg, "t");
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("vocab_size = 12", "vocab_size = 14")).unwrap();
    let ckpt = teacher.join("model.ckpt");
    let base = ["distill", "--data", "synth:copy", "--teacher", s(&ckpt)];
    let out = dir.path().join("s");
    let o = a2d(&[&base[..], &["--config", s(&other), "--out", s(&out)]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocab_size"));
    let o = a2d(&[&base[..], &["--config", s(&cfg), "--out", s(&out), "--parts", "bogus"]].concat());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tsv_training_builds_vocab_from_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("train.tsv");
    let lines: String = (0..20).map(|i| format!("a{} b\tx{} y\n", i % 3, i % 3)).collect();
    fs::write(&tsv, lines).unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("o");
    let o = a2d(&["train-teacher", "--config", s(&cfg), "--data", s(&tsv), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = a2d(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&tsv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
