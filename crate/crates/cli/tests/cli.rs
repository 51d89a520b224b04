use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msq")).args(args).env_remove("MSQ_SEED").output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(msq(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(msq(&["filter", "--manifest", "m.jsonl", "--max-aspekt", "2"]).status.code(), Some(2));
    assert_eq!(msq(&["eval"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let out = msq(&["psnr", "/nonexistent/a.ppm", "/nonexistent/b.ppm"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = msq(&["gen-data", "--n", "6", "--seed", "7", "--out", path(d)]);
        assert!(out.status.success(), "{}", text(&out.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 13);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let caption = fs::read_to_string(a.join("00000.txt")).unwrap();
    assert!(!caption.trim().is_empty());
    assert!(fs::read(a.join("00000.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn filter_splits_stdout_and_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    let lines = [
        r#"{"id":"keep","width":1000,"height":400,"watermark_score":0.5,"clip_score":0.45,"caption":"x"}"#,
        r#"{"id":"wide","width":1000,"height":100,"watermark_score":0.0,"clip_score":0.9,"caption":"x"}"#,
        r#"{"id":"two","width":100,"height":100,"watermark_score":0.51,"clip_score":0.44,"caption":"x"}"#,
        r#"{"id":"broken","width":100}"#,
    ];
    fs::write(&m, lines.join("\n")).unwrap();
    let out = msq(&["filter", "--manifest", path(&m), "--max-aspect", "2.5", "--max-watermark", "0.5", "--min-clip", "0.45"]);
    assert!(out.status.success());
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.contains(r#""id":"keep""#));
    let stderr = text(&out.stderr);
    assert!(stderr.contains("rejected wide: aspect 10 > 2.5"), "{stderr}");
    assert!(stderr.contains("rejected two: watermark 0.51 > 0.5; clip 0.44 < 0.45"), "{stderr}");
    assert!(stderr.contains("line 4"), "{stderr}");
    assert!(stderr.contains("kept 1, rejected 2, malformed 1"), "{stderr}");
}

#[test]
fn stats_counts_chains() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    let mut lines = Vec::new();
    for (chain, len) in [("a", 2), ("b", 3), ("c", 2), ("d", 6)] {
        for step in 1..=len {
            lines.push(format!(
                r#"{{"id":"{chain}{step}","width":8,"height":8,"watermark_score":0,"clip_score":1,"caption":"x","edit_chain_id":"{chain}","edit_step":{step}}}"#
            ));
        }
    }
    fs::write(&m, lines.join("\n")).unwrap();
    let out = msq(&["stats", "--manifest", path(&m)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["records"], 13);
    assert_eq!(v["edit_chains"]["two_step"], 2);
    assert_eq!(v["edit_chains"]["three_step"], 1);
    assert_eq!(v["edit_chains"]["five_plus"], 1);
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_msq"))
        .args(["train", "--preset", "tiny", "--steps", "3", "--checkpoint-every", "2", "--out", path(&run)])
        .env("MSQ_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("backbone sha256"));
    assert!(run.join("step-000002.bin").exists() && run.join("final.bin").exists());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 5);
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 3);

    let ckpt = run.join("final.bin");
    let img = dir.path().join("s.ppm");
    let out = msq(&["sample", "--checkpoint", path(&ckpt), "--prompt", "one red circle", "--steps", "3", "--out", path(&img)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let out = msq(&["psnr", path(&img), path(&img)]);
    assert_eq!(text(&out.stdout).trim(), "99.0000");

    let out = msq(&["eval", "--checkpoint", path(&ckpt), "--n", "1", "--seed", "3", "--steps", "2", "--json"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["categories"].as_array().unwrap().len(), 6);

    let out = msq(&["eval", "--checkpoint", path(&dir.path().join("missing.bin"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_msq"))
        .args(["train", "--preset", "tiny", "--steps", "1", "--seed", "9", "--out", path(&run)])
        .env("MSQ_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 9);
}

#[test]
fn grad_check_passes() {
    let out = msq(&["grad-check"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).lines().count(), 5);
}
