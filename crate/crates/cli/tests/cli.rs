use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn slca(args: &[&str], out_env: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slca"))
        .args(args)
        .env("SLCA_OUT_DIR", out_env)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_model() -> Value {
    json!({
        "variant": "slca_projector",
        "encoder": { "input_size": 32, "embed_dim": 16, "neck_out_dim": 8, "num_blocks": 2, "num_heads": 2 },
        "backbone": { "input_size": 32, "stem_channels": 8, "stage_channels": [8, 8, 16, 16] }
    })
}

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("tiny.bin");
        let o = slca(&["gen-data", "--out", data.to_str().unwrap(), "--n", "48", "--size", "32", "--seed", "3"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Self { dir, data }
    }

    fn config(&self, name: &str, extra: Value) -> PathBuf {
        let mut cfg = json!({
            "model": tiny_model(),
            "hyperparams": { "epochs": 2, "batch_size": 8, "lr": 0.001 },
            "dataset": self.data,
            "output_dir": self.dir.path().join(name),
            "split": { "train": 32, "val": 8, "test": 8 },
            "seeds": [0]
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.dir.path().join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
        path
    }
}

#[test]
fn gen_data_digest_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let oa = slca(&["gen-data", "--out", a.to_str().unwrap()], dir.path());
    let ob = slca(&["gen-data", "--out", b.to_str().unwrap()], dir.path());
    assert_eq!(code(&oa), 0);
    let digest = |o: &Output| String::from_utf8_lossy(&o.stdout).split_whitespace().next().unwrap().to_string();
    assert_eq!(digest(&oa), digest(&ob));
    assert_eq!(std::fs::metadata(&a).unwrap().len(), 32 + 2500 * (3 * 64 * 64 + 1));

    let bad = slca(&["gen-data", "--out", a.to_str().unwrap(), "--n", "101", "--classes", "4"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("multiple"));
}

#[test]
fn gen_data_defaults_to_out_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = slca(&["gen-data", "--n", "8", "--size", "16"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("synth.bin").is_file());
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&slca(&["gen-data", "--n", "many"], dir.path())), 2);
    assert_eq!(code(&slca(&["frobnicate"], dir.path())), 2);
}

#[test]
fn train_is_deterministic_and_keeps_encoder() {
    let f = Fixture::new();
    let cfg_a = f.config("a", json!({}));
    let cfg_b = f.config("b", json!({}));
    for cfg in [&cfg_a, &cfg_b] {
        let o = slca(&["train", "--config", cfg.to_str().unwrap()], f.dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |run: &str, file: &str| std::fs::read(f.dir.path().join(run).join(file)).unwrap();
    assert_eq!(read("a", "record.json"), read("b", "record.json"));
    assert_eq!(read("a", "metrics.jsonl"), read("b", "metrics.jsonl"));
    let record: Value = serde_json::from_slice(&read("a", "record.json")).unwrap();
    assert_eq!(record["encoder_digest_before"], record["encoder_digest_after"]);
    assert_ne!(record["backbone_digest_before"], record["backbone_digest_after"]);
    let first: Value = serde_json::from_str(std::str::from_utf8(&read("a", "metrics.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["run_id", "epoch", "split", "accuracy", "auc", "loss"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
    assert!(f.dir.path().join("a").join("best.ckpt").is_file());
}

#[test]
fn train_config_errors_exit_2() {
    let f = Fixture::new();
    let missing = f.config("m", json!({ "dataset": f.dir.path().join("nope.bin") }));
    assert_eq!(code(&slca(&["train", "--config", missing.to_str().unwrap()], f.dir.path())), 2);
    let unknown = f.config("u", json!({ "learning_rate": 0.1 }));
    assert_eq!(code(&slca(&["train", "--config", unknown.to_str().unwrap()], f.dir.path())), 2);
    let nested = f.config("n", json!({ "hyperparams": { "epochs": 1, "momentum": 0.9 } }));
    assert_eq!(code(&slca(&["train", "--config", nested.to_str().unwrap()], f.dir.path())), 2);
    let bad_batch = f.config("bb", json!({ "hyperparams": { "batch_size": 1 } }));
    assert_eq!(code(&slca(&["train", "--config", bad_batch.to_str().unwrap()], f.dir.path())), 2);
    assert_eq!(code(&slca(&["train", "--config", "/no/such/config.json"], f.dir.path())), 2);
}

#[test]
fn divergence_exits_3() {
    let f = Fixture::new();
    let cfg = f.config("d", json!({ "hyperparams": { "epochs": 2, "batch_size": 8, "lr": 1e30 } }));
    let o = slca(&["train", "--config", cfg.to_str().unwrap()], f.dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let record: Value = serde_json::from_slice(&std::fs::read(f.dir.path().join("d/record.json")).unwrap()).unwrap();
    assert!(record["diverged"].is_string());
}

#[test]
fn ablation_tables_have_expected_rows() {
    let f = Fixture::new();
    let cfg = f.config("abl", json!({ "hyperparams": { "epochs": 1, "batch_size": 8 }, "fractions": [0.5, 1.0] }));
    let c = cfg.to_str().unwrap();
    for (mode, rows) in [("fusion", 5), ("blocks", 6), ("fractions", 4)] {
        let o = slca(&["ablate", "--config", c, "--mode", mode, "--workers", "2"], f.dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let t: Value =
            serde_json::from_slice(&std::fs::read(f.dir.path().join(format!("abl/ablation_{mode}.json"))).unwrap()).unwrap();
        assert_eq!(t["rows"].as_array().unwrap().len(), rows, "{mode}");
        let md = std::fs::read_to_string(f.dir.path().join(format!("abl/ablation_{mode}.md"))).unwrap();
        assert_eq!(md.lines().count(), 2 + if mode == "fractions" { 3 } else { rows });
    }
    let md = std::fs::read_to_string(f.dir.path().join("abl/ablation_fusion.md")).unwrap();
    assert!(md.contains("+ add (no attention)") && md.contains("+ SLCA + projector head"));
    assert_eq!(code(&slca(&["ablate", "--config", c, "--mode", "layers"], f.dir.path())), 2);
}

#[test]
fn gradcheck_pass_and_corrupted_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    std::fs::write(&cfg, serde_json::to_vec(&json!({ "output_dir": dir.path().join("gc") })).unwrap()).unwrap();
    let c = cfg.to_str().unwrap();
    let ok = slca(&["gradcheck", "--config", c, "--block", "slca"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("gc/gradcheck_slca.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    let per_param = report["report"]["per_param"].as_array().unwrap();
    assert!(!per_param.is_empty() && per_param.iter().all(|p| p["max_rel_error"].is_number()));

    let bad = slca(&["gradcheck", "--config", c, "--block", "slca", "--corrupt"], dir.path());
    assert_eq!(code(&bad), 4);
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("gc/gradcheck_slca.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
}

#[test]
fn viz_attn_writes_six_pgms() {
    let f = Fixture::new();
    let cfg = f.config("v", json!({ "hyperparams": { "epochs": 1, "batch_size": 8 } }));
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&slca(&["train", "--config", c], f.dir.path())), 0);
    let ckpt = f.dir.path().join("v/best.ckpt");
    let run = |out: &str| {
        let out = f.dir.path().join(out);
        let o = slca(
            &["viz-attn", "--config", c, "--ckpt", ckpt.to_str().unwrap(), "--image-index", "5", "--out", out.to_str().unwrap()],
            f.dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.into_iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    let a = run("viz1");
    assert_eq!(a.len(), 6);
    for bytes in &a {
        assert!(bytes.starts_with(b"P5\n128 128\n255\n"));
        assert_eq!(bytes.len(), 15 + 16384);
    }
    assert_eq!(a, run("viz2"));
    let o = slca(
        &["viz-attn", "--config", c, "--ckpt", ckpt.to_str().unwrap(), "--image-index", "48", "--out", "x"],
        f.dir.path(),
    );
    assert_eq!(code(&o), 2);
}
