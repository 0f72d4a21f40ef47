use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metarm_cli::commands::{self, read_suite, Axis, RESULT_COLUMNS};
use metarm_cli::io::{fmt_f64, Layout, Table};
use metarm_cli::pipeline;
use metarm_cli::ExperimentConfig;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke_path() -> PathBuf {
    workspace().join("configs/smoke.toml")
}

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(&smoke_path()).unwrap()
}

fn metarm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metarm")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = metarm(args);
    assert!(out.status.success(), "metarm {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stage(name: &str, out: &Path, extra: &[&str]) -> Output {
    let config = smoke_path();
    let mut args = vec![name, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run_ok(&args)
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn gen_is_idempotent_and_writes_one_file_per_task() {
    let dir = tempfile::tempdir().unwrap();
    stage("gen", dir.path(), &["--seed", "3"]);
    let first = snapshot(dir.path());
    stage("gen", dir.path(), &["--seed", "3"]);
    assert_eq!(first, snapshot(dir.path()));
    let data = dir.path().join("seed-3/data");
    let count = |prefix: &str| fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix)).count();
    assert_eq!(count("train-"), 8);
    assert_eq!(count("heldout-"), 2);
}

#[test]
fn generated_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke();
    let layout = Layout::new(dir.path());
    commands::gen(&config, &layout).unwrap();
    for &seed in &config.seeds {
        let suite = read_suite(&config, &layout, seed).unwrap();
        let fresh = pipeline::generate(&config, seed).unwrap();
        assert_eq!(suite.train, fresh.train);
        assert_eq!(suite.heldout, fresh.heldout);
        assert_eq!(suite.distribution, fresh.distribution);
    }
    // Re-serializing what was read gives the same bytes.
    let before = snapshot(dir.path());
    let again = tempfile::tempdir().unwrap();
    commands::gen(&config, &Layout::new(again.path())).unwrap();
    assert_eq!(before, snapshot(again.path()));
}

#[test]
fn staged_pipeline_matches_in_memory_run_and_is_stage_isolated() {
    let dir = tempfile::tempdir().unwrap();
    for s in ["gen", "train", "adapt", "eval", "report"] {
        stage(s, dir.path(), &[]);
    }
    let config = smoke();
    let results = Table::read(&dir.path().join("results.csv"), &RESULT_COLUMNS).unwrap();
    let mut expected = Vec::new();
    for &seed in &config.seeds {
        for r in pipeline::run_seed(&config, seed).unwrap().reports {
            for t in &r.tasks {
                expected.push(vec![
                    seed.to_string(),
                    r.method.clone(),
                    t.split.clone(),
                    t.task_id.to_string(),
                    fmt_f64(t.pl_accuracy),
                    fmt_f64(t.true_reward),
                    t.n_pairs.to_string(),
                ]);
            }
        }
    }
    assert_eq!(results.rows, expected);

    // Delete everything downstream of train and regenerate it.
    let before = snapshot(dir.path());
    for seed in &config.seeds {
        fs::remove_dir_all(dir.path().join(format!("seed-{seed}/policies"))).unwrap();
        fs::remove_file(dir.path().join(format!("seed-{seed}/results.csv"))).unwrap();
    }
    fs::remove_file(dir.path().join("results.csv")).unwrap();
    fs::remove_file(dir.path().join("summary.csv")).unwrap();
    for s in ["adapt", "eval", "report"] {
        stage(s, dir.path(), &[]);
    }
    assert_eq!(before, snapshot(dir.path()));
}

#[test]
fn splits_produce_distinct_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for s in ["gen", "adapt", "eval"] {
        run_ok(&[s, "--config", smoke_path().to_str().unwrap(), "--out", out, "--seed", "0", "--method", "sft"]);
    }
    let t = Table::read(&dir.path().join("seed-0/results.csv"), &RESULT_COLUMNS).unwrap();
    let train: Vec<_> = t.rows.iter().filter(|r| r[2] == "train").collect();
    let heldout: Vec<_> = t.rows.iter().filter(|r| r[2] == "heldout").collect();
    assert_eq!((train.len(), heldout.len()), (8, 2));
    assert!(t.rows.iter().all(|r| r[1] == "sft"));
    // Without a train stage there are no reward artifacts.
    assert!(!dir.path().join("seed-0/train").exists());
}

#[test]
fn missing_upstream_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = metarm(&["adapt", "--config", smoke_path().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("distribution.jsonl"), "{err}");

    stage("gen", dir.path(), &["--seed", "0"]);
    let out = metarm(&["adapt", "--config", smoke_path().to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "0", "--method", "ours"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ours.jsonl"));
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    stage("gen", dir.path(), &["--seed", "0"]);
    let other = dir.path().join("other.toml");
    fs::write(&other, fs::read_to_string(smoke_path()).unwrap().replace("n_pref = 60", "n_pref = 61")).unwrap();
    let out = metarm(&["train", "--config", other.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different config"));
}

#[test]
fn bad_configs_and_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[hp]\ngamma = 3.0\n").unwrap();
    let out = metarm(&["gen", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
    assert_eq!(metarm(&["gen", "--method", "ppo"]).status.code(), Some(1));
    assert_eq!(metarm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(metarm(&["gen", "--config", dir.path().join("absent.toml").to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(metarm(&["sweep", "--axis", "K", "--values", "1.5", "--out", dir.path().to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(metarm(&["--help"]).status.code(), Some(0));
}

#[test]
fn checkgrad_exit_status_reflects_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage("checkgrad", dir.path(), &["--seed", "7"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let table = Table::read(&dir.path().join("checkgrad-7.csv"), &commands::CHECKGRAD_COLUMNS).unwrap();
    assert_eq!(table.rows.len(), 5);

    let out = metarm(&["checkgrad", "--config", smoke_path().to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "7", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn sweep_cardinality_and_singleton() {
    let config = smoke();
    let rows = commands::sweep_rows(&config, Axis::Beta, &[0.5, 2.0, 8.0]).unwrap();
    let mut per_metric: BTreeMap<(String, &str), usize> = BTreeMap::new();
    for r in &rows {
        *per_metric.entry((r.method.clone(), r.metric)).or_default() += 1;
    }
    assert!(per_metric.values().all(|n| *n == 3 * config.seeds.len()), "{per_metric:?}");
    assert!(per_metric.contains_key(&("ours".to_string(), "grad_norm_sq")));

    // A single value at the configured setting is a plain run.
    let single = commands::sweep_rows(&config, Axis::InnerSteps, &[config.hp.inner_steps as f64]).unwrap();
    for r in single.iter().filter(|r| r.metric == "heldout_pl_accuracy") {
        let out = pipeline::run_seed(&config, r.seed).unwrap();
        let report = out.reports.iter().find(|x| x.method == r.method).unwrap();
        assert_eq!(report.mean_accuracy("heldout").unwrap(), r.score);
    }

    let dir = tempfile::tempdir().unwrap();
    stage("sweep", dir.path(), &["--axis", "K", "--values", "0,20"]);
    let t = Table::read(&dir.path().join("sweep-K.csv"), &commands::SWEEP_COLUMNS).unwrap();
    assert!(t.rows.iter().all(|r| r[0] == "K"));
}

#[test]
fn default_pipeline_reproduces_the_reference_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace().join("configs/default.toml");
    run_ok(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    for name in ["results.csv", "summary.csv"] {
        let reference = fs::read_to_string(workspace().join("reference").join(name)).unwrap();
        let produced = fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(produced, reference, "{name} differs from the committed reference");
    }
}
