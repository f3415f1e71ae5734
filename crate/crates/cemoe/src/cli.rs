//! The `cemoe` command line.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or configuration, 2
//! when the work itself fails. Reports go to a run directory named after
//! the hash of the effective configuration, under `--out`, `$CEMOE_OUT` or
//! `./runs`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use cemoe_core::accounting::{self, ArchSpec};
use cemoe_core::gradcheck;
use cemoe_core::model::ModelParams;
use cemoe_core::sweep::{self, SweepConfig, SweepReport};
use cemoe_core::train;
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::bench::{self, LatencyReport};
use crate::config::{self, BenchFile, TrainFile};
use crate::error::{CliError, Result};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "cemoe", version, about = "Mixture-of-experts layers with compressed experts")]
pub struct Cli {
    /// Root directory for run outputs (default: $CEMOE_OUT, else ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print progress to standard error.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and evaluate it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the model seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the expert-reduction sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated k_main values, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        km: Option<Vec<usize>>,
        /// Number of seeds, counting up from --seed (default 0).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure generation latency.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// A sweep.json to join with the measured latencies.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Count active parameters for an architecture spec.
    CountParams {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Check every gradient rule against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild plot series from the reports in a run directory.
    Report {
        /// Run directory holding sweep.json and/or latency.json.
        #[arg(long)]
        run: PathBuf,
        /// Run directory of a bench to join with the sweep in --run.
        #[arg(long)]
        bench: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Diagnostics go to standard error.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(config::content_hash(&serde_json::to_value(value)?))
}

pub fn run(cli: &Cli) -> Result<()> {
    let root = report::out_root(cli.out.as_deref());
    let verbose = cli.verbose > 0;
    match &cli.command {
        Command::Train { config, seed } => cmd_train(&root, config, *seed, verbose),
        Command::Sweep { config, km, seeds, seed } => cmd_sweep(&root, config, km.clone(), *seeds, *seed, verbose),
        Command::Bench { config, sweep } => cmd_bench(&root, config, sweep.as_deref()),
        Command::CountParams { spec } => cmd_count(&root, spec),
        Command::Gradcheck { instances, seed } => cmd_gradcheck(&root, *instances, *seed),
        Command::Report { run, bench } => cmd_report(run, bench.as_deref()),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    steps: usize,
    final_loss: Option<f64>,
    accuracy: f64,
}

fn cmd_train(root: &Path, path: &Path, seed: Option<u64>, verbose: bool) -> Result<()> {
    let mut file: TrainFile = config::load(path)?.value;
    if let Some(s) = seed {
        file.train.seed = s;
    }
    let hash = hash_of(&file)?;
    let dir = report::run_dir(root, "train", &hash);
    if verbose {
        eprintln!("training {} steps into {}", file.train.steps, dir.display());
    }
    let params = ModelParams::<f64>::init(file.model, file.train.seed)?;
    let trained = train::train(params, &file.task, &file.train)?;
    let accuracy = train::evaluate(
        &trained.params,
        &file.task,
        file.eval_batches,
        file.eval_batch_size,
        file.train.mode,
    )?;
    let summary = TrainSummary {
        seed: file.train.seed,
        steps: file.train.steps,
        final_loss: trained.losses.last().copied(),
        accuracy,
    };
    report::write_atomic(&dir.join("losses.csv"), &report::loss_curve_csv(&trained.losses)?)?;
    crate::checkpoint::save(&trained.params, &dir.join("checkpoint.bin"))?;
    report::write_json(&dir.join("train.json"), &summary)?;
    report::write_manifest(
        &dir,
        "train",
        &hash,
        Some(file.train.seed),
        &["losses.csv", "checkpoint.bin", "train.json"],
    )?;
    println!("accuracy {accuracy:.4}, final loss {:.4}", summary.final_loss.unwrap_or(f64::NAN));
    println!("{}", dir.display());
    Ok(())
}

fn cmd_sweep(
    root: &Path,
    path: &Path,
    km: Option<Vec<usize>>,
    seeds: Option<usize>,
    seed: Option<u64>,
    verbose: bool,
) -> Result<()> {
    let mut cfg: SweepConfig = config::load(path)?.value;
    if let Some(km) = km {
        cfg.k_main = km;
    }
    match (seeds, seed) {
        (Some(n), s) => {
            let first = s.unwrap_or(0);
            cfg.seeds = (first..first + n as u64).collect();
        }
        (None, Some(s)) => cfg.seeds = vec![s],
        (None, None) => {}
    }
    let hash = hash_of(&cfg)?;
    let dir = report::run_dir(root, "sweep", &hash);
    let report = sweep::run_sweep(&cfg, |msg| {
        if verbose {
            eprintln!("{msg}");
        }
    })?;
    write_sweep(&dir, &report)?;
    report::write_manifest(&dir, "sweep", &hash, cfg.seeds.first().copied(), &["sweep.json", "sweep.csv"])?;
    for row in std::iter::once(&report.reference).chain(&report.rows) {
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let metric = if row.applicable { show(row.median_metric) } else { "/".into() };
        println!("{:<12} median {:>8}  normalized {:>8}", row.label(), metric, show(row.normalized));
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<()> {
    report::write_json(&dir.join("sweep.json"), report)?;
    report::write_atomic(&dir.join("sweep.csv"), &report::sweep_csv(report)?)
}

fn cmd_bench(root: &Path, path: &Path, sweep: Option<&Path>) -> Result<()> {
    let file: BenchFile = config::load(path)?.value;
    let hash = hash_of(&file)?;
    let dir = report::run_dir(root, "bench", &hash);
    let sweep = sweep.map(read_json::<SweepReport>).transpose()?;
    let extra: Vec<usize> = sweep.iter().flat_map(|s| s.rows.iter().map(|r| r.k_main)).collect();
    let latency = bench::run_model_bench(&file.model, file.seed, &file.k_values, &extra, &file.bench)?;
    let mut files = write_latency(&dir, &latency)?;
    if let Some(sweep) = &sweep {
        if sweep.k_active != file.model.moe.k_active {
            return Err(CliError::Validation(format!(
                "sweep has k_active {} but the bench model has {}",
                sweep.k_active, file.model.moe.k_active
            )));
        }
        let rows = bench::perf_latency_report(sweep, &latency)?;
        report::write_json(&dir.join("perf_latency.json"), &rows)?;
        report::write_atomic(&dir.join("perf_latency.csv"), &report::perf_latency_csv(&rows)?)?;
        files.extend(["perf_latency.json", "perf_latency.csv"]);
    }
    report::write_manifest(&dir, "bench", &hash, Some(file.seed), &files)?;
    for m in latency.all() {
        println!("{:<12} {:.6} s ± {:.6}  ({} iterations)", m.label, m.mean_s, m.std_s, m.iterations);
    }
    if let Some(f) = &latency.fit {
        println!(
            "fit: slope {:.6} s per expert, intercept {:.6} s, R² {:.4}{}",
            f.fit.slope,
            f.fit.intercept,
            f.fit.r_squared,
            if f.moe_dominated { "" } else { " (latency not dominated by experts)" }
        );
    }
    if let Some(o) = latency.ce_overhead_pct {
        println!("compressed-expert overhead over top-k_m: {o:.2}%");
    }
    println!("{}", dir.display());
    Ok(())
}

fn write_latency(dir: &Path, latency: &LatencyReport) -> Result<Vec<&'static str>> {
    report::write_json(&dir.join("latency.json"), latency)?;
    report::write_atomic(&dir.join("latency.csv"), &report::latency_csv(latency)?)?;
    report::write_atomic(&dir.join("latency_vs_k.csv"), &report::scaling_series_csv(latency)?)?;
    Ok(vec!["latency.json", "latency.csv", "latency_vs_k.csv"])
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn cmd_count(root: &Path, path: &Path) -> Result<()> {
    let loaded = config::load::<ArchSpec>(path)?;
    let r = accounting::param_report(&loaded.value)?;
    let dir = report::run_dir(root, "count-params", &loaded.hash);
    report::write_json(&dir.join("param_report.json"), &r)?;
    report::write_manifest(&dir, "count-params", &loaded.hash, None, &["param_report.json"])?;
    print!("{}", report::param_table(&r));
    Ok(())
}

fn cmd_gradcheck(root: &Path, instances: usize, seed: u64) -> Result<()> {
    if instances == 0 {
        return Err(CliError::Validation("--instances must be positive".into()));
    }
    let results = gradcheck::run_suite(instances, seed)?;
    let hash = hash_of(&(instances, seed))?;
    let dir = report::run_dir(root, "gradcheck", &hash);
    report::write_json(&dir.join("gradcheck.json"), &results)?;
    report::write_manifest(&dir, "gradcheck", &hash, Some(seed), &["gradcheck.json"])?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{status:<4} {:<16} max error {:.3e} (tolerance {:.0e}, {} instances)", r.name, r.max_error, r.tolerance, r.instances);
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}

fn cmd_report(run: &Path, bench_dir: Option<&Path>) -> Result<()> {
    let sweep_path = run.join("sweep.json");
    let latency_path = bench_dir.unwrap_or(run).join("latency.json");
    let sweep = sweep_path.exists().then(|| read_json::<SweepReport>(&sweep_path)).transpose()?;
    let latency = latency_path.exists().then(|| read_json::<LatencyReport>(&latency_path)).transpose()?;
    if sweep.is_none() && latency.is_none() {
        return Err(CliError::Validation(format!("{} holds neither sweep.json nor latency.json", run.display())));
    }
    if let Some(s) = &sweep {
        report::write_atomic(&run.join("sweep.csv"), &report::sweep_csv(s)?)?;
        println!("{}", run.join("sweep.csv").display());
    }
    if let Some(l) = &latency {
        report::write_atomic(&run.join("latency_vs_k.csv"), &report::scaling_series_csv(l)?)?;
        println!("{}", run.join("latency_vs_k.csv").display());
    }
    if let (Some(s), Some(l)) = (&sweep, &latency) {
        let rows = bench::perf_latency_report(s, l)?;
        report::write_atomic(&run.join("perf_latency.csv"), &report::perf_latency_csv(&rows)?)?;
        println!("{}", run.join("perf_latency.csv").display());
    }
    Ok(())
}
