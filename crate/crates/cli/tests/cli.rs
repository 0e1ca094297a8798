use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"image_size": 8, "patch_size": 4, "d_model": 16, "heads": 2,
            "n_double_blocks": 1, "n_single_blocks": 1},
  "train": {"iterations": 6, "warmup_steps": 2, "rank": 4, "checkpoint_every": 3},
  "sample": {"steps": 3},
  "data": {"n_per_task": 2, "eval_per_task": 1},
  "eval": {"steps": 2}
}"#;

fn flowfix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowfix"))
        .args(args)
        .env("E2R_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn degrade_train_restore_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let base = dir.path().join("base");
    let run = dir.path().join("run");

    let out = ok(flowfix(&["--config", p(&cfg), "degrade", "--out", p(&data)]));
    assert!(out.contains("wrote 6 train and 3 eval records"), "{out}");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("degraded/train-0000.ppm").exists());

    let out = ok(flowfix(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&base), "--mode", "full", "--quiet"]));
    assert!(out.contains("6 records"), "{out}");

    let out = ok(flowfix(&[
        "--config", p(&cfg), "train", "--data", p(&data), "--out", p(&run),
        "--base", p(&base.join("checkpoint.e2rc")), "--quiet",
    ]));
    assert!(out.contains("text-embedder: frozen"), "{out}");
    for f in ["checkpoint.e2rc", "adapter.e2ra", "loss.csv", "config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 7);

    let info = ok(flowfix(&["adapter", "info", p(&run.join("adapter.e2ra"))]));
    assert!(info.contains("rank: 4"), "{info}");

    let restored = dir.path().join("restored.ppm");
    let input = data.join("degraded/eval-0000.ppm");
    ok(flowfix(&[
        "--config", p(&cfg), "restore", "--checkpoint", p(&run.join("checkpoint.e2rc")),
        "--input", p(&input), "--out", p(&restored), "--task", "rain",
    ]));
    let img = flowfix_core::image::read_ppm(&restored).unwrap();
    assert_eq!(img.shape(), &[8, 8, 3]);

    let report = dir.path().join("report.csv");
    ok(flowfix(&[
        "--config", p(&cfg), "eval", "--checkpoint", p(&run.join("checkpoint.e2rc")),
        "--data", p(&data), "--report", p(&report), "--with-floor", "--with-baseline",
    ]));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("config,task,sigma,n,fid,mmd,psnr,ssim"));
    for label in ["degraded", "baseline", "adapted"] {
        assert!(csv.lines().any(|l| l.starts_with(label)), "{label} rows missing:\n{csv}");
    }
    assert!(report.with_extension("json").exists());

    let merged = dir.path().join("merged.e2rc");
    ok(flowfix(&["adapter", "merge", "--checkpoint", p(&run.join("checkpoint.e2rc")), "--out", p(&merged)]));
    let a = flowfix_core::Checkpoint::load(&run.join("checkpoint.e2rc")).unwrap();
    let m = flowfix_core::Checkpoint::load(&merged).unwrap();
    assert!(m.adapter.is_none());
    let expect = a.adapter.unwrap().merged(&a.model).unwrap();
    assert_eq!(m.model.params, expect.params);
}

#[test]
fn resume_skips_when_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(flowfix(&["--config", p(&cfg), "degrade", "--out", p(&data)]));
    let run = dir.path().join("run");
    let args = ["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&run), "--mode", "full", "--quiet"];
    ok(flowfix(&args));
    let first = std::fs::read(run.join("checkpoint.e2rc")).unwrap();
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    ok(flowfix(&resumed));
    assert_eq!(std::fs::read(run.join("checkpoint.e2rc")).unwrap(), first);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");

    let o = flowfix(&["degrade", "--out", p(&missing), "--tasks", "snow"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expected one of noise, rain, haze"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"rnak": 4}}"#).unwrap();
    assert_eq!(flowfix(&["--config", p(&bad), "config"]).status.code(), Some(2));

    let o = flowfix(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));

    let o = flowfix(&["restore", "--checkpoint", p(&missing), "--input", "x.ppm", "--out", "y.ppm", "--prompt-free"]);
    assert_eq!(o.status.code(), Some(3));

    assert_eq!(flowfix(&["--help"]).status.code(), Some(0));
}

#[test]
fn seed_override_reaches_every_section() {
    let o = ok(flowfix(&["--seed", "42", "config"]));
    let v: serde_json::Value = serde_json::from_str(&o).unwrap();
    for section in ["train", "sample", "data", "eval"] {
        assert_eq!(v[section]["seed"], 42, "{section}");
    }
}
