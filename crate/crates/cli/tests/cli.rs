use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[encoder]
dim = 8
blocks = 1

[lora]
rank = 2

[data]
crop_height = 8
crop_width = 8

[data.scene]
height = 16
width = 16

[pretrain]
iterations = 3
batch = 1

[depth]
iterations = 3
batch = 1

[eval]
heldout = 1

[ablate]
seeds = [0, 1]
ranks = [1, 2]
"#;

fn mmdlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdlora")).args(args).output().unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let pre = mmdlora(&["pretrain", "--config", &cfg, "--out-dir", out_s]);
    assert!(pre.status.success(), "{}", stderr(&pre));
    let adapters = out.join("adapters.ckpt");
    assert!(adapters.exists() && out.join("pretrain.log").exists());
    let adapters_s = adapters.to_str().unwrap();

    let depth = mmdlora(&["train-depth", "--config", &cfg, "--out-dir", out_s, "--adapters", adapters_s]);
    assert!(depth.status.success(), "{}", stderr(&depth));
    let head = out.join("head.ckpt");

    let eval = mmdlora(&[
        "evaluate",
        "--config",
        &cfg,
        "--out-dir",
        out_s,
        "--head",
        head.to_str().unwrap(),
        "--adapters",
        adapters_s,
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["config-hash", "seeds", "metrics", "parameter-count"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let domains: Vec<&str> = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["domain"].as_str().unwrap())
        .collect();
    assert_eq!(domains, ["day-clear", "night", "rain"]);
    for m in report["metrics"].as_array().unwrap() {
        let pct = m["d1_percent"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&pct));
    }
}

#[test]
fn rerun_reproduces_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = mmdlora(&["pretrain", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--seed", "4"]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    assert_eq!(fs::read(a.join("adapters.ckpt")).unwrap(), fs::read(b.join("adapters.ckpt")).unwrap());
}

#[test]
fn lambda_mismatch_exits_two_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{TINY}\n[loss]\nlambdas = [1.0]\n"));
    let r = mmdlora(&["pretrain", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("loss.lambdas"), "{}", stderr(&r));
}

#[test]
fn missing_adapter_file_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let missing = dir.path().join("absent.ckpt");
    let r = mmdlora(&[
        "train-depth",
        "--config",
        &cfg,
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--adapters",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("absent.ckpt"));
}

#[test]
fn baseline_policy_needs_no_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().to_str().unwrap();
    let r = mmdlora(&["train-depth", "--config", &cfg, "--out-dir", out, "--adapter-policy", "none"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let head = dir.path().join("head.ckpt");
    let e = mmdlora(&["evaluate", "--config", &cfg, "--out-dir", out, "--head", head.to_str().unwrap()]);
    assert!(e.status.success(), "{}", stderr(&e));
    let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(text.contains("\"adapter-policy\": \"none\""));
}

#[test]
fn unknown_policy_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let r = mmdlora(&["train-depth", "--config", &cfg, "--adapter-policy", "avg"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let r = mmdlora(&["gradcheck", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    let table = String::from_utf8(r.stdout).unwrap();
    for name in ["attention_block", "alignment_loss", "vtccl_loss", "pretrain_loss", "depth_head"] {
        assert!(table.contains(name));
    }
    assert!(!table.contains("FAIL"));
    assert!(dir.path().join("gradcheck.txt").exists());
}

#[test]
fn gradcheck_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // a finite-difference step this coarse cannot meet a 1e-12 tolerance
    let cfg = config(dir.path(), "[gradcheck]\nstep = 0.5\ntolerance = 1e-12\n");
    let r = mmdlora(&["gradcheck", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn ablate_emits_component_rows_and_rank_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let r = mmdlora(&["ablate", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 9);
    let row = &doc["rows"][0];
    for key in ["mean", "min", "max"] {
        assert!(row["d1_spread"].get(key).is_some());
    }
    let counts: Vec<u64> = doc["ranks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["parameter_count"].as_u64().unwrap())
        .collect();
    assert_eq!(counts[1], 2 * counts[0]);
}
