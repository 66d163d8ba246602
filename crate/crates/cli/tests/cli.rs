//! End-to-end runs of the binary: every subcommand over a small synthetic
//! task, plus config error handling and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
[data]
seed = 11
source_classes = 3
target_classes = 3
dim = 20
latent = 4
source_per_class = 40
target_per_class = 40
overlap = 0.3
separation = 2.5
cluster_stddev = 0.8
noise = 0.3

[arch]
widths = [20, 16, 16]

[pretrain]
base_lr = 0.05
epochs = 6
step_epochs = 4
batch_size = 16

[finetune]
base_lr = 0.02
epochs = 4
step_epochs = 3
batch_size = 16

[experiment]
seeds = [0, 1]
target_train_per_class = 10

[grow]
kind = "widen"
target = "fc2"
size = 8

[maxact]
node = "relu2"
unit = 1
k = 4

[continual]
tasks = 3
"#,
    )
    .unwrap();
    path
}

fn growbrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_growbrain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = growbrain(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_pretrain_grow_finetune_eval_maxact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pre = dir.path().join("pre");

    let out = run_ok(&["pretrain", "--config", path_str(&cfg), "--out", path_str(&pre), "--seed", "0"]);
    assert!(out.contains("pretrained on synth-source"));
    for f in ["pretrained.ckpt", "curves.csv", "metrics.json", "config.toml"] {
        assert!(pre.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pre.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["val"]["macro_accuracy"].as_f64().unwrap() > 0.5);
    let curves = std::fs::read_to_string(pre.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "epoch,train_loss,val_accuracy");
    assert_eq!(curves.lines().count(), 7, "header plus one row per epoch");

    // Grow for the target task from that checkpoint.
    let grown = dir.path().join("grown");
    let ckpt_cfg = dir.path().join("with_ckpt.toml");
    let base = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(
        &ckpt_cfg,
        format!("{base}\n[run]\ncheckpoint = \"{}\"\n", pre.join("pretrained.ckpt").display()),
    )
    .unwrap();
    let out = run_ok(&["grow", "--config", path_str(&ckpt_cfg), "--out", path_str(&grown), "--seed", "0"]);
    assert!(out.contains("grew wa"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(grown.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "wa");
    assert!(!report["report"]["nodes_added"].as_array().unwrap().is_empty());

    // Fine-tune the grown checkpoint on the target.
    let ft = dir.path().join("ft");
    let ft_cfg = dir.path().join("ft.toml");
    std::fs::write(
        &ft_cfg,
        format!("{base}\n[run]\ncheckpoint = \"{}\"\n", grown.join("grown.ckpt").display()),
    )
    .unwrap();
    let out = run_ok(&["finetune", "--config", path_str(&ft_cfg), "--out", path_str(&ft), "--seed", "3"]);
    assert!(out.contains("fine-tuned on synth-target"));
    assert!(ft.join("finetuned.ckpt").exists());

    // Evaluate it on the target test split, then rank activations.
    let ev = dir.path().join("ev");
    let ev_cfg = dir.path().join("ev.toml");
    std::fs::write(
        &ev_cfg,
        format!("{base}\n[run]\ncheckpoint = \"{}\"\n", ft.join("finetuned.ckpt").display()),
    )
    .unwrap();
    let out = run_ok(&["eval", "--config", path_str(&ev_cfg), "--out", path_str(&ev), "--seed", "0"]);
    assert!(out.contains("macro"));
    let detail: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(detail["split"], "test");
    assert!(detail["detail"]["per_class"].as_array().unwrap().len() == 3);

    let ma = dir.path().join("ma");
    run_ok(&["maxact", "--config", path_str(&ev_cfg), "--out", path_str(&ma), "--seed", "0"]);
    let csv = std::fs::read_to_string(ma.join("maxact.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "rank,sample,activation,label");
    assert_eq!(csv.lines().count(), 5, "header plus k rows");
}

#[test]
fn pretrain_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["pretrain", "--config", path_str(&cfg), "--out", path_str(&a), "--seed", "5"]);
    run_ok(&["pretrain", "--config", path_str(&cfg), "--out", path_str(&b), "--seed", "5"]);
    let ca = std::fs::read(a.join("pretrained.ckpt")).unwrap();
    let cb = std::fs::read(b.join("pretrained.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn experiment_grid_writes_results_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("grid");
    let stdout = run_ok(&["experiment", "--config", path_str(&cfg), "--out", path_str(&out_dir)]);
    assert!(stdout.contains("baseline-ft"));
    assert!(stdout.contains("wa"));

    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,variant,scenario,seed,split,accuracy");
    // Two seeds, default method pair, pretrain rows plus val/test per cell.
    assert!(csv.lines().count() > 8);

    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap()).unwrap();
    assert!(doc["config"]["data"]["dim"].as_u64() == Some(20), "config embedded");
    assert!(!doc["results"]["rows"].as_array().unwrap().is_empty());
    assert!(doc["results"]["failures"].as_array().unwrap().is_empty());

    // Resolved config re-parses and pins the defaults that were in effect.
    let resolved = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("widths = [20, 16, 16]") || resolved.contains("widths = [\n    20,\n    16,\n    16,\n]"));

    // Per-run checkpoints for every cell and seed.
    assert!(out_dir.join("pretrained_seed0.ckpt").exists());
    assert!(out_dir.join("wa_s8_all_seed1.ckpt").exists());
}

#[test]
fn experiment_seed_flag_restricts_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("grid1");
    run_ok(&["experiment", "--config", path_str(&cfg), "--out", path_str(&out_dir), "--seed", "1"]);
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(3), Some("1"), "only seed 1 present: {line}");
    }
}

#[test]
fn curves_emits_block_probe_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pre = dir.path().join("pre");
    run_ok(&["pretrain", "--config", path_str(&cfg), "--out", path_str(&pre), "--seed", "0"]);
    let cv_cfg = dir.path().join("cv.toml");
    let base = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(
        &cv_cfg,
        format!("{base}\n[run]\ncheckpoint = \"{}\"\n", pre.join("pretrained.ckpt").display()),
    )
    .unwrap();
    let cv = dir.path().join("cv");
    let out = run_ok(&["curves", "--config", path_str(&cv_cfg), "--out", path_str(&cv), "--seed", "0"]);
    assert!(out.contains("norm ratio"));
    let csv = std::fs::read_to_string(cv.join("curves.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,train_loss,val_accuracy,old_block,new_block,combined"
    );
    assert_eq!(csv.lines().count(), 5, "header plus one row per epoch");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cv.join("metrics.json")).unwrap()).unwrap();
    let ratio = metrics["block_norm_ratio"].as_f64().unwrap();
    assert!(ratio > 0.2 && ratio < 5.0, "scaled blocks should be comparable, got {ratio}");
    assert!(metrics["run"]["block_curves"]["combined"].as_array().unwrap().len() == 4);
}

#[test]
fn continual_compares_direct_and_chained() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("cont");
    let stdout = run_ok(&["continual", "--config", path_str(&cfg), "--out", path_str(&out_dir), "--seed", "0"]);
    assert!(stdout.contains("3 tasks"));
    assert!(stdout.contains("direct"));
    assert!(stdout.contains("chained"));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap()).unwrap();
    let direct = doc["direct_params"].as_u64().unwrap();
    let chained = doc["chained_params"].as_u64().unwrap();
    assert!(chained > direct, "two hops must add more parameters than one");
}

#[test]
fn progressive_mode_reports_matched_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let prog_cfg = dir.path().join("prog.toml");
    let base = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&prog_cfg, base.replace("target_train_per_class = 10", "target_train_per_class = 10\nmode = \"progressive\"")).unwrap();
    let out_dir = dir.path().join("prog");
    let stdout = run_ok(&["experiment", "--config", path_str(&prog_cfg), "--out", path_str(&out_dir), "--seed", "0"]);
    assert!(stdout.contains("wa-grow"));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(doc["ori_dense_params"], doc["grow_dense_params"], "capacity-matched by construction");
}

#[test]
fn config_errors_are_loud() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");

    let bad_key = dir.path().join("bad_key.toml");
    std::fs::write(&bad_key, "[data]\ndimension = 20\n").unwrap();
    let out = growbrain(&["pretrain", "--config", path_str(&bad_key), "--out", path_str(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let bad_kind = dir.path().join("bad_kind.toml");
    std::fs::write(&bad_kind, "[grow]\nkind = \"stretch\"\n").unwrap();
    let out = growbrain(&["grow", "--config", path_str(&bad_kind), "--out", path_str(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown growth kind"));

    let fine = dir.path().join("fine.toml");
    std::fs::write(&fine, "").unwrap();
    let out = growbrain(&["finetune", "--config", path_str(&fine), "--out", path_str(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
