//! End-to-end runs of the `uapforge` binary on a tiny blob dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use uapforge::config::RunConfig;
use uapforge::eval::fooling_ratio;
use uapforge::model::{load_checkpoint, sidecar_path};
use uapforge::tensor::AnyTensor;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn uapforge(dir: &Path, args: &[&str]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uapforge"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("UAPFORGE_") {
            cmd.env_remove(k);
        }
    }
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

/// Writes a small config; `attack` replaces the attack section.
fn config(dir: &Path, attack: Value) -> PathBuf {
    let doc = json!({
        "seed": 3,
        "dataset": {
            "source": "blobs",
            "blobs": {"classes": 3, "n": 240, "shape": [1, 8, 8], "spread": 0.2, "seed": 1},
            "holdout": 60,
            "subset_size": 60
        },
        "model": {"arch": "cnn-tiny", "train": {"epochs": 2, "batch": 32}},
        "attack": attack,
        "output": {"directory": dir.join("out")}
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    path
}

fn quick_attack() -> Value {
    json!({"epochs": 2, "batch_size": 30, "model_steps": 2, "data_steps": 2})
}

fn ok(run: &Run) {
    assert_eq!(run.code, 0, "stdout:\n{}\nstderr:\n{}", run.stdout, run.stderr);
}

fn printed_path(run: &Run, tag: &str) -> PathBuf {
    let line = run.stdout.lines().find(|l| l.starts_with(tag)).unwrap_or_else(|| panic!("no `{tag}` in {}", run.stdout));
    PathBuf::from(line[tag.len()..].trim())
}

fn trained(dir: &Path, attack: Value) -> (String, PathBuf) {
    let cfg = config(dir, attack);
    let cfg_s = cfg.display().to_string();
    let run = uapforge(dir, &["train", "--config", &cfg_s]);
    ok(&run);
    (cfg_s, printed_path(&run, "checkpoint"))
}

fn sidecar(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(sidecar_path(path)).unwrap()).unwrap()
}

#[test]
fn train_writes_a_reproducible_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ckpt_a) = trained(a.path(), quick_attack());
    let (_, ckpt_b) = trained(b.path(), quick_attack());
    assert!(ckpt_a.is_file());
    assert_eq!(ckpt_a.file_name(), ckpt_b.file_name());
    assert_eq!(std::fs::read(&ckpt_a).unwrap(), std::fs::read(&ckpt_b).unwrap());
    assert!(sidecar(&ckpt_a)["config"]["seed"] == 3);
}

#[test]
fn train_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), quick_attack());
    let run = uapforge(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    ok(&run);
    assert!(run.stdout.contains("train accuracy") && run.stdout.contains("test accuracy"));
}

#[test]
fn missing_dataset_path_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), quick_attack());
    let run = uapforge(
        dir.path(),
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "dataset.source=\"idx\"",
            "--set",
            "dataset.images=\"/no/such/images.idx\"",
            "--set",
            "dataset.labels=\"/no/such/labels.idx\"",
        ],
    );
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(run.stderr.contains("dataset.images"), "{}", run.stderr);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"epochs": 2, "rhoo": 1.0}));
    let run = uapforge(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("rhoo"), "{}", run.stderr);
}

#[test]
fn craft_echoes_the_default_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), json!({}));
    let run = uapforge(dir.path(), &["craft", "--config", &cfg]);
    ok(&run);
    let delta = printed_path(&run, "delta");
    let meta = sidecar(&delta);
    let a = &meta["attack"];
    assert_eq!(a["epochs"], 20);
    assert_eq!(a["batch_size"], 125);
    assert_eq!(a["model_steps"], 10);
    assert_eq!(a["data_steps"], 10);
    assert_eq!(a["epsilon"].as_f64().unwrap(), 10.0 / 255.0);
    assert_eq!(a["rho"], 1.0);
    assert_eq!(a["order"], "model_first");
    assert_eq!(a["variant"], "dm-uap");
    assert_eq!(meta["kind"], "delta");
    assert_eq!(meta["n_craft"], 60);
    assert_eq!(meta["runlog"]["epochs"], 20);
    assert!(meta["delta_linf"].as_f64().unwrap() <= 10.0 / 255.0);
    let log = std::fs::read_to_string(delta.with_extension("runlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
}

#[test]
fn spgd_variant_records_zero_neighborhoods() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), quick_attack());
    let run = uapforge(dir.path(), &["craft", "--config", &cfg, "--variant", "spgd"]);
    ok(&run);
    let delta = printed_path(&run, "delta");
    assert!(delta.file_name().unwrap().to_str().unwrap().starts_with("spgd-"));
    let a = &sidecar(&delta)["attack"];
    assert_eq!(a["variant"], "spgd");
    assert_eq!(a["rho"], 0.0);
    assert_eq!(a["radius"], 0.0);
    assert_eq!(a["order"], "none");
}

#[test]
fn crafting_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), quick_attack());
    let first = uapforge(dir.path(), &["craft", "--config", &cfg]);
    ok(&first);
    let p1 = printed_path(&first, "delta");
    let bytes = std::fs::read(&p1).unwrap();
    let second = uapforge(dir.path(), &["craft", "--config", &cfg]);
    ok(&second);
    assert_eq!(printed_path(&second, "delta"), p1);
    assert_eq!(std::fs::read(&p1).unwrap(), bytes);
}

#[test]
fn eval_matches_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), quick_attack());
    let craft = uapforge(dir.path(), &["craft", "--config", &cfg]);
    ok(&craft);
    let delta_path = printed_path(&craft, "delta");
    let run = uapforge(dir.path(), &["eval", "--config", &cfg]);
    ok(&run);

    let csv_path = run.stdout.lines().filter_map(|l| l.strip_prefix("report ")).find(|p| p.ends_with(".csv")).unwrap();
    let mut rdr = csv::Reader::from_path(csv_path.trim()).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);

    let rc = RunConfig::resolve(Some(Path::new(&cfg)), &[], &[]).unwrap();
    let (_, test) = rc.load_splits::<f32>().unwrap();
    let test = test.unwrap();
    let (model, _) = load_checkpoint::<f32>(&ckpt).unwrap();
    let delta = AnyTensor::load(&delta_path).unwrap().into_real::<f32>();
    let direct = fooling_ratio(&model, &test, &delta).unwrap();
    assert_eq!(rows[0][2], format!("{:.4}", direct.fooling_ratio));
    assert_eq!(rows[0][3].parse::<usize>().unwrap(), direct.n_evaluated);
    assert_eq!(&rows[0][4], direct.dataset_fp);
    assert_eq!(&rows[0][5], direct.delta_hash);
}

#[test]
fn eval_of_a_missing_delta_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), quick_attack());
    let run = uapforge(dir.path(), &["eval", "--config", &cfg, "--set", "eval.deltas=[\"/no/such/delta.uapt\"]"]);
    assert_eq!(run.code, 5, "{}", run.stderr);
    assert!(run.stderr.contains("/no/such/delta.uapt"), "{}", run.stderr);
}

fn ablate_rows(sweep: &str) -> Vec<csv::StringRecord> {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), quick_attack());
    let run = uapforge(dir.path(), &["ablate", "--config", &cfg, "--set", sweep]);
    ok(&run);
    let csv_path = run.stdout.lines().filter_map(|l| l.strip_prefix("report ")).find(|p| p.ends_with(".csv")).unwrap();
    let mut rdr = csv::Reader::from_path(csv_path.trim()).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["axis", "value", "fooling_ratio", "n", "final_loss", "delta_hash"]);
    rdr.records().map(|r| r.unwrap()).collect()
}

#[test]
fn ablate_rho_sweep_has_seven_rows() {
    let rows = ablate_rows("ablate.rho=[1,2,4,8,10,12,16]");
    let values: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(values, ["1", "2", "4", "8", "10", "12", "16"]);
    assert!(rows.iter().all(|r| &r[0] == "rho"));
}

#[test]
fn ablate_radius_sweep_has_seven_rows() {
    let rows = ablate_rows("ablate.radius=[1,4,8,16,32,64,100]");
    assert_eq!(rows.len(), 7);
}

#[test]
fn ablate_order_sweep_has_four_rows() {
    let rows = ablate_rows("ablate.order=[\"model_first\",\"data_first\",\"alternating\",\"none\"]");
    let values: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(values, ["model_first", "data_first", "alternating", "none"]);
}

#[test]
fn ablate_with_two_axes_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), quick_attack());
    let run = uapforge(dir.path(), &["ablate", "--config", &cfg, "--set", "ablate.rho=[1,2]", "--set", "ablate.radius=[1]"]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("ablate"), "{}", run.stderr);
}

#[test]
fn verify_checks_and_recomputes_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), quick_attack());
    let craft = uapforge(dir.path(), &["craft", "--config", &cfg]);
    ok(&craft);
    let delta = printed_path(&craft, "delta");
    for artifact in [&ckpt, &delta] {
        let run = uapforge(dir.path(), &["verify", artifact.to_str().unwrap(), "--recompute"]);
        ok(&run);
        assert!(run.stdout.contains("recompute ok"));
    }

    let mut bytes = std::fs::read(&delta).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&delta, bytes).unwrap();
    let run = uapforge(dir.path(), &["verify", delta.to_str().unwrap()]);
    assert_eq!(run.code, 1, "{}", run.stderr);

    let run = uapforge(dir.path(), &["verify", dir.path().join("nothing.uapt").to_str().unwrap()]);
    assert_eq!(run.code, 5);
}

#[test]
fn env_overrides_sit_between_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path(), quick_attack());
    let bin = env!("CARGO_BIN_EXE_uapforge");
    let out = Command::new(bin)
        .current_dir(dir.path())
        .env("UAPFORGE_ATTACK__RHO", "0.25")
        .args(["craft", "--config", &cfg])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let delta = printed_path(&Run { code: 0, stdout: stdout.to_string(), stderr: String::new() }, "delta");
    assert_eq!(sidecar(&delta)["attack"]["rho"], 0.25);

    let out = Command::new(bin)
        .current_dir(dir.path())
        .env("UAPFORGE_ATTACK__RHO", "0.25")
        .args(["craft", "--config", &cfg, "--set", "attack.rho=0.5"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let delta = printed_path(&Run { code: 0, stdout: stdout.to_string(), stderr: String::new() }, "delta");
    assert_eq!(sidecar(&delta)["attack"]["rho"], 0.5);
}
