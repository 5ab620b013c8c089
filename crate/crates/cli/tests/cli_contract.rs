use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use serde_json::{json, Value};
use tempfile::TempDir;

use copra_core::schedule::ScheduleMode;
use copra_core::train::TrainConfig;
use copra_lab::analysis_cmds::{cmd_interp, cmd_merge};
use copra_lab::config::{BaseSpec, FedCmd, InterpCmd, MergeCmd, MtlCmd, PairSpec, PretrainCmd, TaskSpec, TrainCmd};
use copra_lab::sim_cmds::{cmd_ablate, cmd_fedsim, cmd_mtlsim};
use copra_lab::train_cmds::{checkpoint_file, cmd_pretrain, cmd_train};

struct Shared {
    _dir: TempDir,
    base: PathBuf,
    runs: PathBuf,
}

/// One pretrained base and two short CopRA runs, built once per test binary.
fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        cmd_pretrain(&PretrainCmd::default(), &dir.path().join("base")).unwrap();
        let base = dir.path().join("base/base.json");
        let runs = dir.path().join("runs");
        let cfg = TrainCmd { base: BaseSpec::Path(base.clone()), seeds: vec![1, 2], train: short(ScheduleMode::Copra), ..TrainCmd::default() };
        cmd_train(&cfg, &runs).unwrap();
        Shared { _dir: dir, base, runs }
    })
}

fn short(mode: ScheduleMode) -> TrainConfig {
    TrainConfig { total_steps: 200, learning_rate: 5e-3, schedule: mode, ..TrainConfig::default() }
}

fn base_spec() -> BaseSpec {
    BaseSpec::Path(shared().base.clone())
}

fn ckpt(seed: u64) -> PathBuf {
    shared().runs.join(checkpoint_file("copra", seed, "final"))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_copra-lab")).args(args).output().unwrap()
}

#[test]
fn unknown_config_field_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{ "seeds": [1], "learning_rate": 0.1 }"#).unwrap();
    let out = lab(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn seed_override_rejected_without_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["merge", "--seed-override", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no seed"));
}

#[test]
fn binary_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let body = json!({
        "base": { "path": shared().base },
        "seeds": [4],
        "train": { "total_steps": 40 },
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let mut manifests = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let out_dir = dir.path().join(name);
        let out = lab(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", threads]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["runs"][0]["seed"], 4);
        manifests.push(fs::read_to_string(out_dir.join("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    assert!(manifests[0].contains("copra_seed4/checkpoint_early.json"));
}

#[test]
fn interpolating_a_checkpoint_with_itself_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = InterpCmd { base: base_spec(), pairs: vec![PairSpec { a1: ckpt(1), a2: ckpt(1), label: None }], ..InterpCmd::default() };
    let s = cmd_interp(&cfg, dir.path()).unwrap();
    for method in ["fusion", "mixture", "fusion+align"] {
        let pair = &s["methods"][method]["pairs"][0];
        assert_eq!(pair["barrier"], 0.0, "{method}");
        let accs: Vec<f64> = pair["accuracy"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(accs.iter().all(|&a| a == accs[0]), "{method}: {accs:?}");
    }
}

#[test]
fn merge_reports_gap_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MergeCmd { base: base_spec(), adapters: vec![ckpt(1), ckpt(2)], ..MergeCmd::default() };
    cmd_merge(&cfg, dir.path()).unwrap();
    assert!(dir.path().join("merged.json").exists());
    assert!(dir.path().join("gap.csv").exists());
}

#[test]
fn merge_missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MergeCmd { base: base_spec(), adapters: vec![ckpt(1), dir.path().join("nope.json")], ..MergeCmd::default() };
    let err = cmd_merge(&cfg, &dir.path().join("o")).unwrap_err();
    assert!(format!("{err:#}").contains("nope.json"));
}

fn fed(clients: usize, identical: bool) -> FedCmd {
    FedCmd {
        base: base_spec(),
        clients,
        seeds: vec![1],
        strategies: vec![ScheduleMode::Copra],
        train: short(ScheduleMode::Copra),
        identical_clients: identical,
        ..FedCmd::default()
    }
}

#[test]
fn single_client_federation_returns_the_client() {
    let dir = tempfile::tempdir().unwrap();
    cmd_fedsim(&fed(1, false), dir.path()).unwrap();
    for row in csv_rows(&dir.path().join("results.csv")) {
        assert_eq!(row[2], row[3]);
    }
}

#[test]
fn identical_clients_fuse_to_themselves() {
    let dir = tempfile::tempdir().unwrap();
    cmd_fedsim(&fed(3, true), dir.path()).unwrap();
    let clients = csv_rows(&dir.path().join("clients.csv"));
    assert_eq!(clients.len(), 3);
    let merged = &csv_rows(&dir.path().join("results.csv"))[0][3];
    assert!(clients.iter().all(|c| &c[5] == merged));
}

#[test]
fn too_many_clients_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cmd_fedsim(&fed(100, false), dir.path()).is_err());
}

fn mtl(tasks: [TaskSpec; 2], c: f64) -> MtlCmd {
    MtlCmd { base: base_spec(), tasks, seeds: vec![3], strategies: vec![ScheduleMode::Full], train: short(ScheduleMode::Full), c, ..MtlCmd::default() }
}

#[test]
fn mtl_endpoint_and_self_fusion() {
    let dir = tempfile::tempdir().unwrap();
    cmd_mtlsim(&mtl([TaskSpec::TaskA, TaskSpec::TaskB], 1.0), &dir.path().join("c1")).unwrap();
    let row = &csv_rows(&dir.path().join("c1/results.csv"))[0];
    assert_eq!(row[3], row[5], "merged accuracy on task B equals the task-B model");

    cmd_mtlsim(&mtl([TaskSpec::TaskA, TaskSpec::TaskA], 0.5), &dir.path().join("self")).unwrap();
    let row = &csv_rows(&dir.path().join("self/results.csv"))[0];
    assert_eq!(row[6], row[7]);
}

#[test]
fn ablate_flags_divergence_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copra_lab::config::AblateCmd {
        base: base_spec(),
        learning_rates: vec![1e-3, 1e200],
        steps: vec![40],
        strategies: vec![ScheduleMode::Copra],
        train: TrainConfig { total_steps: 40, ..TrainConfig::default() },
        series_points: 2,
        ..Default::default()
    };
    let s = cmd_ablate(&cfg, dir.path()).unwrap();
    assert_eq!(s["cells"], 2);
    assert_eq!(s["diverged"].as_array().unwrap().len(), 1);
    assert_eq!(csv_rows(&dir.path().join("grid.csv")).len(), 2);
}

#[test]
fn manifest_hashes_match_files() {
    use sha2::{Digest, Sha256};
    let runs = &shared().runs;
    let manifest: Value = serde_json::from_str(&fs::read_to_string(runs.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.len() >= 8);
    for f in files {
        let bytes = fs::read(runs.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"], bytes.len());
        assert_eq!(f["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
}
