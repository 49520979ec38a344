use std::path::{Path, PathBuf};
use std::process::Command;

use dexlab_core::metrics::read_jsonl;

fn write_corpus(dir: &Path) -> PathBuf {
    let p = dir.join("corpus.txt");
    let text: String = (0..400)
        .map(|i| format!("line {i}: the quick brown fox jumps over {} lazy dogs.\n", i % 7))
        .collect();
    std::fs::write(&p, text).unwrap();
    p
}

fn write_config(dir: &Path) -> PathBuf {
    let corpus = write_corpus(dir);
    let cfg = serde_json::json!({
        "corpus": {"paths": [corpus], "val_fraction": 0.2},
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 4, "n_kv_heads": 2, "d_head": 4,
                  "d_ff": 32, "max_seq": 64},
        "train": {"total_steps": 4, "batch_size": 2, "seq_len": 32, "log_every": 1,
                  "retrieval_fraction": 0.5, "retrieval_queries": 1},
        "adapt": {"total_steps": 3, "batch_size": 2, "seq_len": 32, "log_every": 1,
                  "retrieval_fraction": 0.5, "retrieval_queries": 1},
        "dex": {"calib_batches": 1, "calib_batch_size": 2},
        "task": {"n_needles": 2, "context_lengths": [32], "depths": [0.0, 1.0], "samples_per_cell": 2},
        "eval": {"ppl_tokens": 256, "analysis_samples": 2, "analysis_length": 32},
        "bench": {"seq_lens": [16], "warmup_batches": 1, "measured_batches": 2,
                  "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "n_kv_heads": 2, "d_head": 8,
                            "d_ff": 32, "max_seq": 32}}
    });
    let p = dir.join("c.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn dexlab(args: &[&str]) -> i32 {
    dexlab::run(std::iter::once("dexlab").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metrics(dir: &Path) -> Vec<dexlab_core::metrics::MetricRecord> {
    read_jsonl(&dir.join("metrics.jsonl")).unwrap()
}

#[test]
fn full_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let c = s(&cfg);
    let base = tmp.path().join("base");
    assert_eq!(dexlab(&["pretrain", "--config", c, "--arch", "baseline", "--out", s(&base)]), 0);
    let base_ck = base.join("checkpoints/final.ckpt");
    assert!(base_ck.is_file());
    assert!(base.join("config.json").is_file());
    let m = metrics(&base);
    assert_eq!(m.iter().filter(|r| r.metric == "loss").count(), 4);

    let sel = tmp.path().join("sel");
    assert_eq!(dexlab(&["select-heads", "--config", c, "--ckpt", s(&base_ck), "--k", "2", "--out", s(&sel)]), 0);
    let chosen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sel.join("selection.json")).unwrap()).unwrap();
    assert_eq!(chosen["layers"][0].as_array().unwrap().len(), 2);

    let dex = tmp.path().join("dex");
    assert_eq!(dexlab(&["adapt", "--config", c, "--base", s(&base_ck), "--out", s(&dex)]), 0);
    let dex_ck = dex.join("checkpoints/final.ckpt");
    assert!(dex_ck.is_file());
    let m = metrics(&dex);
    assert!(m.iter().any(|r| r.phase == "adapt" && r.metric == "lambda"));
    assert!(m.iter().any(|r| r.phase == "select" && r.metric == "selected"));

    let ev = tmp.path().join("eval");
    assert_eq!(
        dexlab(&["eval", "--config", c, "--ckpt", s(&base_ck), "--heads-from", s(&dex_ck), "--out", s(&ev)]),
        0
    );
    let m = metrics(&ev);
    for k in ["val_ppl", "retrieval_accuracy_mean", "attention_to_answer_mean"] {
        assert!(m.iter().any(|r| r.metric == k), "missing {k}");
    }

    let an = tmp.path().join("an");
    assert_eq!(
        dexlab(&["analyze", "--config", c, "--ckpt", s(&dex_ck), "--compare", s(&base_ck), "--out", s(&an)]),
        0
    );
    let m = metrics(&an);
    assert!(m.iter().any(|r| r.metric == "head_importance"));
    assert!(m.iter().any(|r| r.metric.starts_with("magnitude_")));

    let ea = tmp.path().join("ea");
    assert_eq!(dexlab(&["effattn", "--config", c, "--ckpt", s(&dex_ck), "--out", s(&ea)]), 0);
    let rows = std::fs::read_to_string(ea.join("effattn.jsonl")).unwrap();
    assert!(rows.lines().any(|l| l.contains("\"method\":\"pinv\"")));

    let b = tmp.path().join("bench");
    assert_eq!(dexlab(&["bench", "--config", c, "--out", s(&b)]), 0);
    let rows = std::fs::read_to_string(b.join("bench.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn sweep_emits_one_summary_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let c = s(&cfg);
    let base = tmp.path().join("base");
    assert_eq!(dexlab(&["pretrain", "--config", c, "--out", s(&base), "--set", "train.total_steps=1"]), 0);
    let ck = base.join("checkpoints/final.ckpt");
    for (sweep, want) in [
        ("lambda-init", vec!["lambda_init=0.8", "lambda_init=0.5", "lambda_init=0.3", "lambda_init=depth_aware"]),
        ("k", vec!["k=1", "k=2", "k=3", "k=4"]),
    ] {
        let out = tmp.path().join(sweep);
        assert_eq!(
            dexlab(&["adapt", "--config", c, "--base", s(&ck), "--sweep", sweep, "--out", s(&out),
                     "--set", "adapt.total_steps=1"]),
            0
        );
        let m = metrics(&out);
        for w in &want {
            assert!(
                m.iter().any(|r| r.phase == "ablation" && r.metric == "retrieval_accuracy_mean" && r.subset.as_deref() == Some(*w)),
                "missing {w}"
            );
        }
    }
}

#[test]
fn runtime_errors_exit_one_with_category() {
    let bin = env!("CARGO_BIN_EXE_dexlab");
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["eval", "--ckpt", "/nonexistent.ckpt", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: config:"), "{err}");

    let garbage = tmp.path().join("g.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let cfg = write_config(tmp.path());
    let out = Command::new(bin)
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--ckpt")
        .arg(&garbage)
        .arg("--out")
        .arg(tmp.path().join("e"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: format:"));

    let out = Command::new(bin).arg("nope").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("select-heads"));
}
