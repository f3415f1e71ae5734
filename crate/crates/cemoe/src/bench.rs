//! Latency measurement.
//!
//! A pass feeds a batch of seeded random prompts to a model and greedily
//! generates a fixed number of tokens, in `f32`, on the calling thread only.
//! When several configurations are compared, their passes are interleaved
//! round-robin so slow drift of the machine affects all of them alike.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::{Duration, Instant};

use cemoe_core::model::{ModelConfig, ModelParams};
use cemoe_core::moe_layer::ExpertMode;
use cemoe_core::stats::{self, LinearFit};
use cemoe_core::sweep::{config_label, SweepReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Latencies reported for the full-size models on GPU, in seconds. Kept for
/// comparison in reports; desk-scale runs check only their ordering.
pub mod reference {
    pub const PHI_MOE_TOP2_S: f64 = 5.59;
    pub const PHI_MOE_TOP1_CE_S: f64 = 4.35;
    pub const PHI_MOE_TOP1_S: f64 = 4.01;
    pub const PHI_MOE_CE_OVERHEAD_PCT: f64 = 8.5;
    pub const OLMOE_TOP8_S: f64 = 7.14;
    pub const OLMOE_TOP4_CE_S: f64 = 5.83;
    pub const OLMOE_TOP4_S: f64 = 5.31;
    pub const OLMOE_CE_OVERHEAD_PCT: f64 = 9.7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Prompt length.
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    #[serde(default = "defaults::warmup_iters")]
    pub warmup_iters: usize,
    #[serde(default = "defaults::timed_iters")]
    pub timed_iters: usize,
    /// Generated tokens per pass.
    #[serde(default = "defaults::completion_len")]
    pub completion_len: usize,
    /// Seeds prompt content.
    #[serde(default)]
    pub prompt_seed: u64,
    /// Must be 1: timed regions run on a single thread.
    #[serde(default = "defaults::threads")]
    pub threads: usize,
}

mod defaults {
    pub fn batch_size() -> usize {
        8
    }
    pub fn seq_len() -> usize {
        32
    }
    pub fn warmup_iters() -> usize {
        10
    }
    pub fn timed_iters() -> usize {
        30
    }
    pub fn completion_len() -> usize {
        32
    }
    pub fn threads() -> usize {
        1
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: defaults::batch_size(),
            seq_len: defaults::seq_len(),
            warmup_iters: defaults::warmup_iters(),
            timed_iters: defaults::timed_iters(),
            completion_len: defaults::completion_len(),
            prompt_seed: 0,
            threads: defaults::threads(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads != 1 {
            return Err(CliError::Validation(format!(
                "benchmarks run on one thread; threads = {} is not supported",
                self.threads
            )));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.timed_iters == 0 || self.completion_len == 0 {
            return Err(CliError::Validation("bench sizes and timed_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Something whose single pass can be timed.
pub trait Workload {
    fn label(&self) -> String;

    /// Number of active experts, for the scaling fit.
    fn k(&self) -> Option<usize> {
        None
    }

    /// One untimed-by-itself pass over `prompts` (`[batch × len]`). Returns
    /// the number of expert evaluations performed.
    fn run(&mut self, prompts: &[usize], batch: usize) -> Result<usize>;
}

/// Prompt feed plus greedy generation on a model.
pub struct ModelWorkload {
    pub label: String,
    pub params: ModelParams<f32>,
    pub mode: ExpertMode,
    pub completion_len: usize,
}

impl Workload for ModelWorkload {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn k(&self) -> Option<usize> {
        Some(self.mode.selection(&self.params.cfg.moe).0)
    }

    fn run(&mut self, prompts: &[usize], batch: usize) -> Result<usize> {
        let g = self.params.generate(prompts, batch, self.completion_len, self.mode)?;
        black_box(&g.tokens);
        Ok(g.expert_evals)
    }
}

/// Spins for a fixed duration; a workload of known cost.
pub struct BusyWait {
    pub label: String,
    pub duration: Duration,
    pub k: Option<usize>,
}

impl Workload for BusyWait {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn k(&self) -> Option<usize> {
        self.k
    }

    fn run(&mut self, _prompts: &[usize], _batch: usize) -> Result<usize> {
        let start = Instant::now();
        while start.elapsed() < self.duration {
            std::hint::spin_loop();
        }
        Ok(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub label: String,
    pub k: Option<usize>,
    pub mean_s: f64,
    pub std_s: f64,
    pub iterations: usize,
    /// Expert evaluations in one pass.
    pub expert_evals: usize,
    pub samples_s: Vec<f64>,
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn prompts(cfg: &BenchConfig, vocab_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prompt_seed);
    (0..cfg.batch_size * cfg.seq_len).map(|_| rng.gen_range(0..vocab_size)).collect()
}

/// Times every workload on the same prompts, interleaving their passes.
pub fn measure(workloads: &mut [&mut dyn Workload], cfg: &BenchConfig, vocab_size: usize) -> Result<Vec<Measurement>> {
    cfg.validate()?;
    let prompts = prompts(cfg, vocab_size);
    let mut evals = vec![0; workloads.len()];
    for _ in 0..cfg.warmup_iters {
        for (w, e) in workloads.iter_mut().zip(&mut evals) {
            *e = w.run(&prompts, cfg.batch_size)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.timed_iters); workloads.len()];
    for _ in 0..cfg.timed_iters {
        for ((w, s), e) in workloads.iter_mut().zip(&mut samples).zip(&mut evals) {
            let start = Instant::now();
            *e = w.run(&prompts, cfg.batch_size)?;
            s.push(start.elapsed().as_secs_f64());
        }
    }
    let resolution = timer_resolution().as_secs_f64();
    let shortest = samples.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if resolution > 0.01 * shortest {
        return Err(CliError::Runtime(format!(
            "timer resolution {resolution:e} s is coarser than 1% of the shortest pass ({shortest:e} s); \
             use a larger model or a longer completion"
        )));
    }
    Ok(workloads
        .iter()
        .zip(samples)
        .zip(evals)
        .map(|((w, s), e)| Measurement {
            label: w.label(),
            k: w.k(),
            mean_s: stats::mean(&s).unwrap_or(0.0),
            std_s: stats::std_dev(&s).unwrap_or(0.0),
            iterations: s.len(),
            expert_evals: e,
            samples_s: s,
        })
        .collect())
}

pub fn measure_latency(workload: &mut dyn Workload, cfg: &BenchConfig, vocab_size: usize) -> Result<Measurement> {
    Ok(measure(&mut [workload], cfg, vocab_size)?.remove(0))
}

/// Linear fit of mean latency against `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub fit: LinearFit,
    /// False when the fitted growth over the swept range is under 5% of the
    /// mean latency, i.e. expert work does not dominate the pass.
    pub moe_dominated: bool,
}

/// Requires at least three distinct `k`.
pub fn check_k_values(k_values: &[usize]) -> Result<()> {
    let mut sorted = k_values.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != k_values.len() || sorted.len() < 3 {
        return Err(CliError::Validation(format!(
            "latency scaling needs at least three distinct k values, got {k_values:?}"
        )));
    }
    Ok(())
}

pub fn fit_scaling(measurements: &[Measurement]) -> Result<ScalingFit> {
    let ks: Vec<f64> = measurements.iter().filter_map(|m| m.k.map(|k| k as f64)).collect();
    if ks.len() != measurements.len() {
        return Err(CliError::Validation("every scaling measurement needs a k".into()));
    }
    let ys: Vec<f64> = measurements.iter().map(|m| m.mean_s).collect();
    let fit = stats::linear_fit(&ks, &ys)?;
    let span = ks.iter().copied().fold(f64::MIN, f64::max) - ks.iter().copied().fold(f64::MAX, f64::min);
    let mean = stats::mean(&ys).unwrap_or(0.0);
    Ok(ScalingFit {
        fit,
        moe_dominated: fit.slope * span >= 0.05 * mean,
    })
}

/// Measures one workload per `k` (built by `make`) and fits latency to `k`.
pub fn latency_scaling(
    k_values: &[usize],
    cfg: &BenchConfig,
    vocab_size: usize,
    mut make: impl FnMut(usize) -> Result<Box<dyn Workload>>,
) -> Result<(Vec<Measurement>, ScalingFit)> {
    check_k_values(k_values)?;
    let mut ws: Vec<Box<dyn Workload>> = k_values.iter().map(|&k| make(k)).collect::<Result<_>>()?;
    let mut refs: Vec<&mut dyn Workload> = ws.iter_mut().map(|w| w.as_mut() as &mut dyn Workload).collect();
    let ms = measure(&mut refs, cfg, vocab_size)?;
    let fit = fit_scaling(&ms)?;
    Ok((ms, fit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Full top-k passes, one per swept `k`.
    pub scaling: Vec<Measurement>,
    pub fit: Option<ScalingFit>,
    /// Top-k, top-k_m and top-k_m with compressed experts.
    pub comparison: Vec<Measurement>,
    /// `(top-k_m+ce − top-k_m) / top-k_m`, in percent.
    pub ce_overhead_pct: Option<f64>,
    /// Further top-k_m and top-k_m+ce passes requested for a sweep join.
    #[serde(default)]
    pub extra: Vec<Measurement>,
}

impl LatencyReport {
    /// Every distinct measurement, scaling first.
    pub fn all(&self) -> Vec<&Measurement> {
        let mut out: Vec<&Measurement> = self.scaling.iter().collect();
        for m in self.comparison.iter().chain(&self.extra) {
            if !out.iter().any(|o| o.label == m.label) {
                out.push(m);
            }
        }
        out
    }
}

/// `top-{k}` on the model with `k_active = k`.
fn full_workload(base: &ModelParams<f32>, k: usize, completion_len: usize) -> Result<ModelWorkload> {
    let mut params = base.clone();
    let mut moe = params.cfg.moe;
    moe.k_active = k;
    moe.k_main = moe.k_main.min(k);
    moe.validate()?;
    params.set_moe_config(moe);
    Ok(ModelWorkload {
        label: config_label(k, false),
        params,
        mode: ExpertMode::Full,
        completion_len,
    })
}

/// Builds the model from `model` and `seed`, then measures the scaling sweep
/// over `k_values`, the top-k / top-k_m / top-k_m+ce comparison, and top-m /
/// top-m+ce for every `m` in `extra_k_main`, all in one interleaved run. Configurations that coincide (top-k_m and the full model
/// at `k = k_m` do identical work) are measured once.
pub fn run_model_bench(
    model: &ModelConfig,
    seed: u64,
    k_values: &[usize],
    extra_k_main: &[usize],
    cfg: &BenchConfig,
) -> Result<LatencyReport> {
    cfg.validate()?;
    check_k_values(k_values)?;
    let mut model = *model;
    model.moe.renormalize_main = false;
    if model.seq_len < cfg.seq_len + cfg.completion_len {
        return Err(CliError::Validation(format!(
            "model seq_len {} is shorter than prompt plus completion ({})",
            model.seq_len,
            cfg.seq_len + cfg.completion_len
        )));
    }
    let base = ModelParams::<f64>::init(model, seed)?.cast::<f32>();
    let (k, km) = (model.moe.k_active, model.moe.k_main);

    let mut workloads: BTreeMap<String, ModelWorkload> = BTreeMap::new();
    let mut order = Vec::new();
    for &kv in k_values.iter().chain([k, km].iter()) {
        let w = full_workload(&base, kv, cfg.completion_len)?;
        if !workloads.contains_key(&w.label) {
            order.push(w.label.clone());
            workloads.insert(w.label.clone(), w);
        }
    }
    let ce_label = config_label(km, true);
    let mut ce_k_main = vec![km];
    for &m in extra_k_main {
        if !ce_k_main.contains(&m) {
            ce_k_main.push(m);
        }
    }
    for &m in &ce_k_main {
        if m > k || m == 0 {
            return Err(CliError::Validation(format!("k_main {m} outside 1..={k}")));
        }
        let w = full_workload(&base, m, cfg.completion_len)?;
        if !workloads.contains_key(&w.label) {
            order.push(w.label.clone());
            workloads.insert(w.label.clone(), w);
        }
        if m < k {
            let mut params = base.clone();
            params.set_k_main(m)?;
            let label = config_label(m, true);
            order.push(label.clone());
            workloads.insert(
                label.clone(),
                ModelWorkload {
                    label,
                    params,
                    mode: ExpertMode::Compressed,
                    completion_len: cfg.completion_len,
                },
            );
        }
    }

    let mut refs: Vec<&mut dyn Workload> = Vec::new();
    let mut by_label: BTreeMap<&String, &mut ModelWorkload> = workloads.iter_mut().collect();
    for label in &order {
        refs.push(by_label.remove(label).expect("inserted above"));
    }
    let measured = measure(&mut refs, cfg, model.vocab_size)?;
    let find = |label: &str| measured.iter().find(|m| m.label == label).cloned();

    let scaling: Vec<Measurement> = k_values
        .iter()
        .filter_map(|&kv| find(&config_label(kv, false)))
        .collect();
    let fit = fit_scaling(&scaling)?;
    let mut comparison: Vec<Measurement> = [config_label(k, false), config_label(km, false)]
        .iter()
        .filter_map(|l| find(l))
        .collect();
    comparison.dedup_by(|a, b| a.label == b.label);
    let ce = find(&ce_label);
    let ce_overhead_pct = match (&ce, find(&config_label(km, false))) {
        (Some(c), Some(b)) => Some((c.mean_s - b.mean_s) / b.mean_s * 100.0),
        _ => None,
    };
    comparison.extend(ce);
    let extra = order
        .iter()
        .filter(|l| !scaling.iter().chain(&comparison).any(|m| &m.label == *l))
        .filter_map(|l| find(l))
        .collect();
    Ok(LatencyReport {
        scaling,
        fit: Some(fit),
        comparison,
        ce_overhead_pct,
        extra,
    })
}

/// One configuration's metric and latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfRow {
    pub config: String,
    pub metric: Option<f64>,
    pub latency_s: f64,
    /// For `top-k_m+ce` rows, overhead over `top-k_m` in percent.
    pub ce_overhead_pct: Option<f64>,
}

/// `(label, median metric)` for the reference and every applicable row,
/// without duplicate labels.
pub fn sweep_points(report: &SweepReport) -> Vec<(String, Option<f64>)> {
    let mut out: Vec<(String, Option<f64>)> = vec![(report.reference.label(), report.reference.median_metric)];
    for row in report.rows.iter().filter(|r| r.applicable) {
        if !out.iter().any(|(l, _)| *l == row.label()) {
            out.push((row.label(), row.median_metric));
        }
    }
    out
}

/// Joins metrics and latencies by configuration label.
pub fn perf_latency_join(points: &[(String, Option<f64>)], latencies: &[&Measurement]) -> Result<Vec<PerfRow>> {
    let lat = |label: &str| latencies.iter().find(|m| m.label == label).map(|m| m.mean_s);
    let unmatched: Vec<&str> = points
        .iter()
        .filter(|(l, _)| lat(l).is_none())
        .map(|(l, _)| l.as_str())
        .collect();
    if !unmatched.is_empty() {
        return Err(CliError::Validation(format!(
            "no latency measured for configurations: {}",
            unmatched.join(", ")
        )));
    }
    Ok(points
        .iter()
        .map(|(label, metric)| {
            let latency_s = lat(label).expect("checked above");
            let ce_overhead_pct = label
                .strip_suffix("+ce")
                .and_then(lat)
                .map(|base| (latency_s - base) / base * 100.0);
            PerfRow {
                config: label.clone(),
                metric: *metric,
                latency_s,
                ce_overhead_pct,
            }
        })
        .collect())
}

pub fn perf_latency_report(sweep: &SweepReport, latencies: &LatencyReport) -> Result<Vec<PerfRow>> {
    perf_latency_join(&sweep_points(sweep), &latencies.all())
}
