use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kwsforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kwsforge"))
        .args(args)
        .current_dir(dir)
        .env_remove("KWSFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = kwsforge(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn usage_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(kwsforge(&["frobnicate"], dir.path()).status.code(), Some(2));
    let out = kwsforge(&["mix", "--manifest", "missing.jsonl", "--spec", "x.json", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn gen_prompts_and_synth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("corpus.txt"), "turn on the lights\nhey google stop\nplay some jazz\n").unwrap();
    ok(&kwsforge(
        &["gen-prompts", "--corpus", "corpus.txt", "--count", "4", "--neg-count", "3", "--seed", "5", "--out", "p.jsonl"],
        d,
    ));
    let text = fs::read_to_string(d.join("p.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    for v in &lines {
        for key in ["text", "label", "template_id", "query"] {
            assert!(v.get(key).is_some(), "{v}");
        }
    }
    assert!(lines[4..].iter().all(|v| v["label"] == "negative" && !v["text"].as_str().unwrap().contains("google")));

    ok(&kwsforge(&["synth", "--prompts", "p.jsonl", "--out-dir", "wavs", "--speakers", "a,b", "--seed", "1"], d));
    let manifest = fs::read_to_string(d.join("wavs/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert!(d.join("wavs").join(first["wav_path"].as_str().unwrap()).exists());
    assert!(first["keyword_end_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn pipeline_mix_train_eval_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("pools.json"),
        r#"{"tts_pos":12,"tts_neg":12,"tts_voices":3,"real_speakers":4,"real_utts_per_speaker":3,"real_neg":12,"real_neg_speakers":4}"#,
    )
    .unwrap();
    ok(&kwsforge(
        &["oracle-pools", "--out-dir", "data", "--spec", "pools.json", "--eval-pos", "6", "--eval-neg", "8", "--seed", "3"],
        d,
    ));
    fs::write(d.join("mix.json"), r#"{"tts_pos":8,"tts_neg":8,"real_pos":{"n_speakers":2,"utts_per_speaker":3},"real_neg":8,"seed":1}"#)
        .unwrap();
    ok(&kwsforge(&["mix", "--manifest", "data/pools.jsonl", "--spec", "mix.json", "--out", "data/mix.jsonl"], d));
    assert_eq!(fs::read_to_string(d.join("data/mix.jsonl")).unwrap().lines().count(), 30);

    fs::write(
        d.join("train.json"),
        r#"{"steps":2,"batch_size":4,"learning_rate":0.003,"augment":{"snr_db_range":null,"reverb_probability":0.0}}"#,
    )
    .unwrap();
    ok(&kwsforge(
        &["train", "--manifest", "data/mix.jsonl", "--train-config", "train.json", "--out", "run", "--seed", "4"],
        d,
    ));
    assert!(d.join("run/model.kws").exists());
    assert!(d.join("run/model.kws.json").exists());
    assert_eq!(fs::read_to_string(d.join("run/train_log.csv")).unwrap().lines().count(), 3);

    ok(&kwsforge(
        &[
            "eval", "--model", "run/model.kws", "--pos-manifest", "data/eval_pos.jsonl", "--neg-manifest",
            "data/eval_neg.jsonl", "--out", "report.json",
        ],
        d,
    ));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["target_fa_per_hour"], serde_json::json!(0.133));
    assert!(fs::read_to_string(d.join("report.json.det.csv")).unwrap().starts_with("threshold,"));

    ok(&kwsforge(
        &[
            "sweep", "--axis", "n_speakers", "--values", "1,2,4", "--base-spec", "mix.json", "--manifest",
            "data/pools.jsonl", "--train-config", "train.json", "--pos-manifest", "data/eval_pos.jsonl",
            "--neg-manifest", "data/eval_neg.jsonl", "--out", "sweep", "--parallel", "2",
        ],
        d,
    ));
    let results = fs::read_to_string(d.join("sweep/results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], "axis_value,frr_percent,fa_per_hour,n_real_pos,n_speakers,utts_per_speaker,seed,status");
    let axis: Vec<usize> = rows[1..].iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(axis, vec![1, 2, 4]);
    assert!(rows[1..].iter().all(|r| r.ends_with(",ok")));

    let out = kwsforge(&["report", "sweep/results.csv", "sweep/results.csv", "--out", "combined.csv"], d);
    ok(&out);
    assert_eq!(fs::read_to_string(d.join("combined.csv")).unwrap().lines().count(), 7);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FRR"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("corpus.txt"), "turn on the lights\nplay some jazz\nwhat time is it\n").unwrap();
    let run = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_kwsforge"))
            .args(["gen-prompts", "--corpus", "corpus.txt", "--count", "20"])
            .env("KWSFORGE_SEED", seed)
            .current_dir(d)
            .output()
            .unwrap();
        ok(&out);
        out.stdout
    };
    assert_eq!(run("7"), run("7"));
    assert_ne!(run("7"), run("8"));
    let explicit = kwsforge(&["gen-prompts", "--corpus", "corpus.txt", "--count", "20", "--seed", "7"], d);
    assert_eq!(explicit.stdout, run("7"));
}
