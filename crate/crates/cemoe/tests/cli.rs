use std::path::{Path, PathBuf};

use cemoe::bench::BenchConfig;
use cemoe::config::{self, BenchFile, TrainFile};
use cemoe_core::model::{Mixing, ModelConfig};
use cemoe_core::moe_layer::ExpertMode;
use cemoe_core::router::MoeConfig;
use cemoe_core::sweep::SweepConfig;
use cemoe_core::task::{SyntheticTask, TaskKind};
use cemoe_core::train::TrainConfig;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> i32 {
    cemoe::cli::main(std::iter::once("cemoe").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The single run directory created under `root`.
fn only_run(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.remove(0)
}

fn tiny_model(k: usize, km: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        hidden_dim: 8,
        n_layers: 1,
        seq_len: 12,
        moe: MoeConfig::new(8, k, km, 8, 4).unwrap(),
        mixing: Mixing::MeanPool,
    }
}

fn tiny_sweep() -> SweepConfig {
    let steps = TrainConfig {
        steps: 3,
        batch_size: 4,
        ..Default::default()
    };
    SweepConfig {
        model: tiny_model(8, 4),
        pretrain_task: SyntheticTask::new(TaskKind::ModularSum, 12, 2, 1).unwrap(),
        finetune_task: SyntheticTask::new(TaskKind::ModularSum, 10, 2, 2).unwrap(),
        pretrain: steps,
        finetune: steps,
        k_main: vec![4],
        seeds: vec![0],
        eval_batches: 1,
        eval_batch_size: 8,
    }
}

fn write_config<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, config::to_file_text(value).unwrap()).unwrap();
    p
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["gradcheck", "--instances", "many"]), 1);
    assert_eq!(run(&["gradcheck", "--instances", "0"]), 1);
}

#[test]
fn invalid_configs_exit_with_one_and_missing_files_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "name": "x", "hidden_dim": 4}"#).unwrap();
    assert_eq!(run(&["--out", path_str(&out), "count-params", "--spec", path_str(&bad)]), 1);
    std::fs::write(&bad, r#"{"version": 1, "name": "x", "hidden_dim": 4, "ffn_dim": 4, "n_moe_layers": 1,
        "n_experts": 2, "k_active": 3, "k_main": 1, "non_moe_params": 0}"#)
    .unwrap();
    assert_eq!(run(&["--out", path_str(&out), "count-params", "--spec", path_str(&bad)]), 1);
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["--out", path_str(&out), "count-params", "--spec", path_str(&missing)]), 2);
    assert!(!out.exists());

    let mut bench = BenchFile {
        model: tiny_model(4, 2),
        bench: BenchConfig::default(),
        k_values: vec![1, 2, 2],
        seed: 0,
    };
    let p = write_config(dir.path(), "bench.json", &bench);
    assert_eq!(run(&["--out", path_str(&out), "bench", "--config", path_str(&p)]), 1);
    bench.k_values = vec![1, 2, 4];
    bench.bench.threads = 2;
    let p = write_config(dir.path(), "bench.json", &bench);
    assert_eq!(run(&["--out", path_str(&out), "bench", "--config", path_str(&p)]), 1);
}

#[test]
fn count_params_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = repo().join("configs/phi_moe.json");
    let mut reports = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(i.to_string());
        assert_eq!(run(&["--out", path_str(&out), "count-params", "--spec", path_str(&spec)]), 0);
        let run_dir = only_run(&out);
        reports.push(std::fs::read(run_dir.join("param_report.json")).unwrap());
        assert!(run_dir.join("manifest.json").exists());
    }
    assert_eq!(reports[0], reports[1]);
    let r: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(r["moe_active_ce"], 2_517_983_232u64);
}

#[test]
fn sweep_overrides_give_six_rows_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.json", &tiny_sweep());
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(i.to_string());
        let code = run(&["--out", path_str(&out), "sweep", "--config", path_str(&cfg), "--km", "1,2,4", "--seeds", "3"]);
        assert_eq!(code, 0);
        let d = only_run(&out);
        outputs.push((std::fs::read(d.join("sweep.csv")).unwrap(), std::fs::read(d.join("sweep.json")).unwrap(), d));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);

    let mut r = csv::Reader::from_reader(&outputs[0].0[..]);
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let data: Vec<_> = rows.iter().filter(|r| &r[3] == "false").collect();
    assert_eq!(data.len(), 6);
    assert!(data.iter().all(|r| r[8].split(';').count() == 3));

    // Rebuilding the series from the stored JSON gives the same CSV.
    let d = &outputs[0].2;
    std::fs::remove_file(d.join("sweep.csv")).unwrap();
    assert_eq!(run(&["report", "--run", path_str(d)]), 0);
    assert_eq!(std::fs::read(d.join("sweep.csv")).unwrap(), outputs[0].0);
    assert_eq!(run(&["report", "--run", path_str(dir.path())]), 1);
}

#[test]
fn train_writes_a_loadable_checkpoint_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let file = TrainFile {
        model: tiny_model(4, 2),
        task: SyntheticTask::new(TaskKind::Copy, 12, 3, 3).unwrap(),
        train: TrainConfig {
            steps: 4,
            batch_size: 4,
            mode: ExpertMode::Compressed,
            ..Default::default()
        },
        eval_batches: 1,
        eval_batch_size: 4,
    };
    let cfg = write_config(dir.path(), "train.json", &file);
    let out = dir.path().join("out");
    assert_eq!(run(&["--out", path_str(&out), "train", "--config", path_str(&cfg), "--seed", "5"]), 0);
    let d = only_run(&out);
    let params = cemoe::checkpoint::load(&d.join("checkpoint.bin")).unwrap();
    assert_eq!(params.cfg.moe.k_main, 2);
    let losses = std::fs::read_to_string(d.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("train.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);
}

#[test]
fn bench_joins_with_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_cfg = write_config(dir.path(), "sweep.json", &tiny_sweep());
    let sweep_out = dir.path().join("sweep");
    assert_eq!(run(&["--out", path_str(&sweep_out), "sweep", "--config", path_str(&sweep_cfg), "--km", "2,4"]), 0);
    let sweep_json = only_run(&sweep_out).join("sweep.json");

    let bench = BenchFile {
        model: ModelConfig {
            seq_len: 12,
            ..tiny_model(8, 4)
        },
        bench: BenchConfig {
            batch_size: 2,
            seq_len: 8,
            warmup_iters: 0,
            timed_iters: 2,
            completion_len: 4,
            ..Default::default()
        },
        k_values: vec![2, 4, 8],
        seed: 0,
    };
    let bench_cfg = write_config(dir.path(), "bench.json", &bench);
    let out = dir.path().join("bench");
    let code = run(&["--out", path_str(&out), "bench", "--config", path_str(&bench_cfg), "--sweep", path_str(&sweep_json)]);
    assert_eq!(code, 0);
    let d = only_run(&out);
    let perf = std::fs::read_to_string(d.join("perf_latency.csv")).unwrap();
    let configs: Vec<&str> = perf.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(configs, vec!["top-8", "top-2", "top-2+ce", "top-4", "top-4+ce"]);
    for f in ["latency.json", "latency.csv", "latency_vs_k.csv", "manifest.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    // The report command joins a sweep run with a separate bench run.
    let sweep_dir = sweep_json.parent().unwrap();
    assert_eq!(run(&["report", "--run", path_str(sweep_dir), "--bench", path_str(&d)]), 0);
    assert!(sweep_dir.join("perf_latency.csv").exists());
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--out", path_str(dir.path()), "gradcheck", "--instances", "2", "--seed", "3"]), 0);
    let d = only_run(dir.path());
    let results: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("gradcheck.json")).unwrap()).unwrap();
    assert!(results.as_array().unwrap().len() > 20);
}
