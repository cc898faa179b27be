use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmps::harness::checkpoint;
use dmps::harness::export::read_matrix_csv;
use dmps::harness::RunConfig;
use dmps::tasks::Task;

fn dmps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmps")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path, task: Task) -> PathBuf {
    let mut c = RunConfig::defaults(task);
    c.training.batches = 6;
    c.training.batch_size = 8;
    c.training.log_interval = 3;
    c.training.monitor_sets = 8;
    c.training.eval_sets = 24;
    c.optimizer.scheduler_interval = 2;
    c.sweep.seeds = vec![0, 1];
    let path = dir.join(format!("{task}.toml"));
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_with(dir: &Path, suffix: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn print_defaults_is_loadable_toml() {
    for task in ["gaussian", "counting"] {
        let out = dmps(&["print-defaults", "--task", task]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.lines().any(|l| l.starts_with('#')));
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c.task.to_string(), task);
    }
}

#[test]
fn train_evaluate_export_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for task in [Task::Gaussian, Task::Counting] {
        let config = tiny_config(dir.path(), task);
        let runs: Vec<PathBuf> = (0..2).map(|k| dir.path().join(format!("{task}_{k}"))).collect();
        for run in &runs {
            let out = dmps(&["train", "--config", s(&config), "--seed", "3", "--out", s(run)]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            let ckpt = run.join("checkpoint.bin");
            let before = fs::read(&ckpt).unwrap();
            assert!(dmps(&["evaluate", "--out", s(run), "--sets", "16"]).status.success());
            let out = dmps(&["export-kernel", "--out", s(run), "--sets", "12", "--per-set", "3"]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            assert_eq!(fs::read(&ckpt).unwrap(), before, "checkpoint modified");
        }
        // The checkpoint embeds the run config, which records the output directory.
        let params = |run: &PathBuf| checkpoint::load(&run.join("checkpoint.bin")).unwrap().params;
        assert_eq!(params(&runs[0]), params(&runs[1]));
        for suffix in ["metrics.jsonl", "evaluation.json", ".csv", "kernel_summary.json"] {
            let a = files_with(&runs[0], suffix);
            assert!(!a.is_empty(), "{suffix}");
            assert_eq!(a, files_with(&runs[1], suffix), "{suffix} differs");
        }
        for (name, _) in files_with(&runs[0], ".csv") {
            let m = read_matrix_csv(&runs[0].join(&name));
            if name.ends_with("_W.csv") {
                let w = m.unwrap();
                for i in 0..w.rows() {
                    assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            } else if name.ends_with("_K.csv") {
                let k = m.unwrap();
                assert!(k.sub(&k.transpose()).unwrap().max_abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sweeps_write_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let gaussian = tiny_config(dir.path(), Task::Gaussian);
    let counting = tiny_config(dir.path(), Task::Counting);
    let mut tables = Vec::new();
    for k in 0..2 {
        let rho_dir = dir.path().join(format!("rho_{k}"));
        let out = dmps(&["sweep-rho", "--config", s(&gaussian), "--grid", "0,0.95", "--out", s(&rho_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let gamma_dir = dir.path().join(format!("gamma_{k}"));
        let out = dmps(&["sweep-gamma", "--config", s(&counting), "--grid", "0.02,0.5", "--out", s(&gamma_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        tables.push((
            fs::read_to_string(rho_dir.join("results.csv")).unwrap(),
            fs::read_to_string(gamma_dir.join("results.csv")).unwrap(),
            fs::read(rho_dir.join("rho_0.95/seed_1/metrics.jsonl")).unwrap(),
        ));
    }
    assert_eq!(tables[0], tables[1]);
    let rho = &tables[0].0;
    assert_eq!(rho.lines().next().unwrap(), "rho,seed_0,seed_1,mean,sd");
    assert_eq!(rho.lines().count(), 3);
    assert!(tables[0].1.starts_with("gamma,seed_0,seed_1,mean,sd\n0.02,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");
    let o = s(&out_dir);

    assert_eq!(dmps(&["train", "--rho", "1.0", "--out", o]).status.code(), Some(2));
    assert_eq!(dmps(&["train", "--task", "counting", "--gamma", "1.5", "--blocks", "denoise", "--out", o]).status.code(), Some(2));
    assert_eq!(dmps(&["train", "--gamma", "high", "--out", o]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(dmps(&["train", "--config", s(&missing), "--out", o]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "task = \"gaussian\"\nseed = \"zero\"\n").unwrap();
    assert_eq!(dmps(&["train", "--config", s(&bad), "--out", o]).status.code(), Some(2));

    let mut c = RunConfig::defaults(Task::Counting);
    c.training.batches = 50;
    c.training.batch_size = 4;
    c.training.eval_sets = 4;
    c.optimizer.learning_rate = 1e12;
    let nan = dir.path().join("nan.toml");
    fs::write(&nan, c.to_toml().unwrap()).unwrap();
    let out = dmps(&["train", "--config", s(&nan), "--out", o]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn verify_reports_and_fails_on_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let out = dmps(&["verify", "--out", s(&clean)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(clean.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(!clean.join("verify-scratch").exists());

    let faulty = dir.path().join("faulty");
    let out = dmps(&["verify", "--out", s(&faulty), "--inject-fault", "unnormalized-weights"]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(faulty.join("report.json")).unwrap()).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"weights-row-stochastic"));
    assert_eq!(report["checks"].as_array().unwrap().len(), report["total"].as_u64().unwrap() as usize);
}
