//! Report files: atomic writes, run directories, manifests, CSV and JSON
//! renderings of the core reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cemoe_core::accounting::ParamReport;
use cemoe_core::sweep::{SweepReport, SweepRow};
use serde::Serialize;

use crate::bench::{LatencyReport, PerfRow};
use crate::error::{CliError, Result};

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "CEMOE_OUT";
/// Output root when neither a flag nor [`OUT_ENV`] is given.
pub const DEFAULT_OUT: &str = "runs";

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Runtime(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Output root: the explicit flag, else `$CEMOE_OUT`, else `runs`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// `<root>/<command>-<first 12 hex digits of the config hash>`.
pub fn run_dir(root: &Path, command: &str, config_hash: &str) -> PathBuf {
    root.join(format!("{command}-{}", &config_hash[..config_hash.len().min(12)]))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub crate_version: String,
    pub format_versions: FormatVersions,
    pub files: Vec<String>,
    /// Seconds since the Unix epoch. The only time-dependent value a run
    /// writes.
    pub created_unix: u64,
}

#[derive(Debug, Serialize)]
pub struct FormatVersions {
    pub config: u64,
    pub checkpoint: u32,
}

pub fn write_manifest(dir: &Path, command: &str, config_hash: &str, seed: Option<u64>, files: &[&str]) -> Result<()> {
    let manifest = Manifest {
        command: command.into(),
        config_hash: config_hash.into(),
        seed,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        format_versions: FormatVersions {
            config: crate::config::CONFIG_VERSION,
            checkpoint: crate::checkpoint::FORMAT_VERSION,
        },
        files: files.iter().map(|s| s.to_string()).collect(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn sweep_record(row: &SweepRow, reference: bool) -> Vec<String> {
    vec![
        row.label(),
        row.k_main.to_string(),
        row.with_ce.to_string(),
        reference.to_string(),
        row.applicable.to_string(),
        opt(row.median_metric),
        opt(row.normalized),
        opt(row.median_final_loss),
        join(row.results.iter().map(|r| r.seed)),
        join(row.results.iter().map(|r| opt(r.metric))),
        join(row.results.iter().filter_map(|r| r.error.clone())),
    ]
}

/// The reference row first, then two rows per requested `k_main`.
pub fn sweep_csv(report: &SweepReport) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record([
            "config",
            "k_main",
            "with_ce",
            "reference",
            "applicable",
            "median_metric",
            "normalized",
            "median_final_loss",
            "seeds",
            "metrics",
            "errors",
        ])?;
        w.write_record(sweep_record(&report.reference, true))?;
        for row in &report.rows {
            w.write_record(sweep_record(row, false))?;
        }
        Ok(())
    })
}

/// One line per step, one column per loss curve.
pub fn loss_curve_csv(losses: &[f64]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["step", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        Ok(())
    })
}

pub fn latency_csv(report: &LatencyReport) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["label", "k", "mean_s", "std_s", "iterations", "expert_evals"])?;
        for m in report.all() {
            w.write_record([
                m.label.clone(),
                m.k.map(|k| k.to_string()).unwrap_or_default(),
                m.mean_s.to_string(),
                m.std_s.to_string(),
                m.iterations.to_string(),
                m.expert_evals.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// `(k, mean seconds)` pairs of the scaling sweep.
pub fn scaling_series_csv(report: &LatencyReport) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["k", "mean_s"])?;
        for m in &report.scaling {
            w.write_record([m.k.unwrap_or(0).to_string(), m.mean_s.to_string()])?;
        }
        Ok(())
    })
}

/// `(latency, metric)` points, one per configuration.
pub fn perf_latency_csv(rows: &[PerfRow]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["config", "latency_s", "metric", "ce_overhead_pct"])?;
        for r in rows {
            w.write_record([r.config.clone(), r.latency_s.to_string(), opt(r.metric), opt(r.ce_overhead_pct)])?;
        }
        Ok(())
    })
}

fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Human-readable table of a parameter report.
pub fn param_table(r: &ParamReport) -> String {
    let pct = |x: f64| format!("{:.1}%", cemoe_core::accounting::round1(x * 100.0));
    let rows = [
        ("active MoE params, top-k", group(r.moe_active_full)),
        ("active MoE params, compressed", group(r.moe_active_ce)),
        ("total active, top-k", group(r.total_active_full)),
        ("total active, compressed", group(r.total_active_ce)),
        ("saving", pct(r.saving_ratio)),
        ("active MoE params, compressed (bank counted once)", group(r.moe_active_ce_strict)),
        ("total active, compressed (bank counted once)", group(r.total_active_ce_strict)),
        ("saving (bank counted once)", pct(r.saving_ratio_strict)),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = format!("{}\n", r.name);
    for (k, v) in rows {
        out += &format!("  {k:<width$}  {v:>15}\n");
    }
    out
}
