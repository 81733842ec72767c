use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &[&str] = &[
    "--set",
    "embed_dim=16",
    "--set",
    "n_heads=2",
    "--set",
    "n_layers_vision=1",
    "--set",
    "n_layers_text=1",
    "--set",
    "n_layers_decoder=1",
    "--set",
    "output_token_len=64",
    "--set",
    "batch_size=8",
    "--set",
    "warmup_steps=2",
];

fn clips(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clips")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: &str, seed: &str) -> std::path::PathBuf {
    let o = clips(&["gen-data", "--n", n, "--seed", seed, "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("records.jsonl")
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn help_exits_zero_and_lists_flags() {
    let o = clips(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["gen-data", "train", "eval", "sweep", "plot"] {
        let o = clips(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--seed") && text.contains("--jobs"), "{sub} help:\n{text}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = gen(a.path(), "100", "7");
    let rb = gen(b.path(), "100", "7");
    assert_eq!(std::fs::read_to_string(&ra).unwrap().lines().count(), 100);
    assert_eq!(digest(&ra), digest(&rb));
}

#[test]
fn gen_data_rejects_bad_noise_rate() {
    let d = tempfile::tempdir().unwrap();
    let o = clips(&["gen-data", "--n", "10", "--noise-rate", "1.5", "--out", p(d.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let data = gen(&d.path().join("data"), "16", "1");
    let out = d.path().join("run");
    let o = clips(&["train", "--stage", "finetune", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = clips(&["train", "--data", p(&data), "--out", p(&out), "--set", "beta=banana"]);
    assert_eq!(code(&o), 2);
    let cfg = d.path().join("bad.txt");
    std::fs::write(&cfg, "learning_rate = 3\n").unwrap();
    let o = clips(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pipeline_train_finetune_eval() {
    let d = tempfile::tempdir().unwrap();
    let data = gen(&d.path().join("data"), "32", "3");
    let pre = d.path().join("pre");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&pre), "--seed", "5", "--set", "beta=0"];
    args.extend_from_slice(TINY);
    let o = clips(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() > 0);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("caption_loss").is_none(), "{line}");
        assert_eq!(v["total_loss"], v["contrastive_loss"]);
    }

    let fine = d.path().join("fine");
    let ck = pre.join("checkpoint.ckpt");
    let mut args = vec![
        "train", "--stage", "finetune", "--init", p(&ck), "--data", p(&data), "--out", p(&fine), "--set",
        "resolution=48",
    ];
    args.extend_from_slice(TINY);
    let o = clips(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(fine.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["caption_loss"].is_number());

    let ck = fine.join("checkpoint.ckpt");
    let (r1, r2) = (d.path().join("r1.json"), d.path().join("r2.json"));
    for r in [&r1, &r2] {
        let o = clips(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--report", p(r)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&r1).unwrap()).unwrap();
    for dir in ["i2t", "t2i"] {
        let k = |n: u32| rep[format!("{dir}_r{n}")].as_f64().unwrap();
        assert!(k(1) <= k(5) && k(5) <= k(10));
    }

    let o = clips(&["eval", "--checkpoint", p(&ck), "--data", p(&d.path().join("nope.jsonl")), "--report", p(&r1)]);
    assert_eq!(code(&o), 2);

    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[8] = 7;
    let old = d.path().join("old.ckpt");
    std::fs::write(&old, bytes).unwrap();
    let o = clips(&["eval", "--checkpoint", p(&old), "--data", p(&data), "--report", p(&r1)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 7"));
}

#[test]
fn sweep_then_plot() {
    let d = tempfile::tempdir().unwrap();
    let data = gen(&d.path().join("data"), "24", "4");
    let csv = d.path().join("sweep.csv");
    let charts = d.path().join("charts");
    let mut args = vec![
        "sweep", "--strategies", "truncate,subcaption", "--lengths", "4,8,16", "--seeds", "0,1", "--data", p(&data),
        "--out", p(&csv), "--plot-dir", p(&charts), "--jobs", "2", "--set", "epochs=1",
    ];
    args.extend_from_slice(TINY);
    let o = clips(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.starts_with("strategy,length,seed,r1_i2t,r1_t2i,mean_r1"));

    let again = d.path().join("again");
    let o = clips(&["plot", "--csv", p(&csv), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in ["truncate", "subcaption"] {
        let name = format!("{s}.png");
        assert_eq!(digest(&charts.join(&name)), digest(&again.join(&name)));
    }

    let empty = d.path().join("empty.csv");
    std::fs::write(&empty, "strategy,length,seed,r1_i2t,r1_t2i,mean_r1\n").unwrap();
    let o = clips(&["plot", "--csv", p(&empty), "--out", p(&again)]);
    assert_eq!(code(&o), 2);
}
