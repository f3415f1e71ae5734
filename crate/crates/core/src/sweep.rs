//! The expert-reduction sweep.
//!
//! For every seed a model is first trained in full top-k mode on one task
//! (the pretraining stand-in), then finetuned on a second, shifted task under
//! each configuration:
//!
//! * the full top-k reference,
//! * top-`k_m` without compensation, for every requested `k_m`,
//! * top-`k_m` with compressed experts, for every `k_m < k`.
//!
//! Cells report the median over seeds and the ratio of that median to the
//! reference median.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::moe_layer::ExpertMode;
use crate::stats;
use crate::task::SyntheticTask;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SweepConfig {
    pub model: ModelConfig,
    pub pretrain_task: SyntheticTask,
    pub finetune_task: SyntheticTask,
    pub pretrain: TrainConfig,
    /// Mode and `k_main` are set per cell.
    pub finetune: TrainConfig,
    pub k_main: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain_task.validate()?;
        self.finetune_task.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let k = self.model.moe.k_active;
        if let Some(&bad) = self.k_main.iter().find(|&&km| km == 0 || km > k) {
            return Err(Error::Config(format!("k_main {bad} outside 1..={k}")));
        }
        if self.seeds.is_empty() || self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("sweep needs seeds and a non-empty evaluation".into()));
        }
        Ok(())
    }
}

/// One seed's outcome in one cell.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedResult {
    pub seed: u64,
    pub metric: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRow {
    pub k_main: usize,
    pub with_ce: bool,
    /// False for the compressed-expert cell at `k_main = k`, which has no
    /// auxiliary experts to compress.
    pub applicable: bool,
    pub results: Vec<SeedResult>,
    pub median_metric: Option<f64>,
    pub median_final_loss: Option<f64>,
    /// `median_metric / reference median`.
    pub normalized: Option<f64>,
}

impl SweepRow {
    pub fn label(&self) -> String {
        config_label(self.k_main, self.with_ce)
    }
}

/// `top-4`, `top-4+ce`, ...
pub fn config_label(k_main: usize, with_ce: bool) -> String {
    if with_ce {
        format!("top-{k_main}+ce")
    } else {
        format!("top-{k_main}")
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepReport {
    pub k_active: usize,
    /// The full top-k reference cell.
    pub reference: SweepRow,
    /// Two rows per requested `k_main`, without and with compressed experts.
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, k_main: usize, with_ce: bool) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.k_main == k_main && r.with_ce == with_ce)
    }
}

fn cell(k_main: usize, with_ce: bool, applicable: bool, results: Vec<SeedResult>) -> SweepRow {
    let metrics: Vec<f64> = results.iter().filter_map(|r| r.metric).collect();
    let losses: Vec<f64> = results.iter().filter_map(|r| r.final_loss).collect();
    SweepRow {
        k_main,
        with_ce,
        applicable,
        results,
        median_metric: stats::median(&metrics),
        median_final_loss: stats::median(&losses),
        normalized: None,
    }
}

/// Runs every cell. A failing run is recorded in its cell and the sweep
/// carries on; only an invalid configuration is an error.
///
/// `progress` is called with a short description before each training run.
pub fn run_sweep(cfg: &SweepConfig, mut progress: impl FnMut(&str)) -> Result<SweepReport> {
    cfg.validate()?;
    let k = cfg.model.moe.k_active;
    let mut model_cfg = cfg.model;
    // With the main weights left as routed, a ones bank makes the
    // compressed-expert model start exactly at the top-k_m model.
    model_cfg.moe.renormalize_main = false;

    let mut reference = Vec::new();
    let mut cells: Vec<(usize, bool, Vec<SeedResult>)> = Vec::new();
    for &km in &cfg.k_main {
        cells.push((km, false, Vec::new()));
        cells.push((km, true, Vec::new()));
    }

    for &seed in &cfg.seeds {
        progress(&format!("seed {seed}: pretraining"));
        let pretrained = ModelParams::<f64>::init(model_cfg, seed).and_then(|p| {
            let tcfg = TrainConfig {
                seed,
                mode: ExpertMode::Full,
                k_main: None,
                ..cfg.pretrain
            };
            train(p, &cfg.pretrain_task, &tcfg).map(|t| t.params)
        });
        let pretrained = match pretrained {
            Ok(p) => p,
            Err(e) => {
                let failed = |seed| SeedResult {
                    seed,
                    metric: None,
                    final_loss: None,
                    error: Some(format!("pretraining: {e}")),
                };
                reference.push(failed(seed));
                for c in &mut cells {
                    if c.0 < k || !c.1 {
                        c.2.push(failed(seed));
                    }
                }
                continue;
            }
        };

        progress(&format!("seed {seed}: {}", config_label(k, false)));
        reference.push(finetune(cfg, &pretrained, seed, ExpertMode::Full, k));
        for c in &mut cells {
            let (km, with_ce) = (c.0, c.1);
            if with_ce && km == k {
                continue;
            }
            progress(&format!("seed {seed}: {}", config_label(km, with_ce)));
            let mode = if with_ce { ExpertMode::Compressed } else { ExpertMode::Halved };
            c.2.push(finetune(cfg, &pretrained, seed, mode, km));
        }
    }

    let mut reference = cell(k, false, true, reference);
    let base = reference.median_metric;
    let normalize = |row: &mut SweepRow| {
        row.normalized = match (row.median_metric, base) {
            (Some(m), Some(b)) if b > 0.0 => Some(m / b),
            _ => None,
        };
    };
    normalize(&mut reference);
    let rows = cells
        .into_iter()
        .map(|(km, with_ce, results)| {
            let mut row = cell(km, with_ce, !(with_ce && km == k), results);
            normalize(&mut row);
            row
        })
        .collect();
    Ok(SweepReport {
        k_active: k,
        reference,
        rows,
    })
}

fn finetune(cfg: &SweepConfig, pretrained: &ModelParams<f64>, seed: u64, mode: ExpertMode, k_main: usize) -> SeedResult {
    let tcfg = TrainConfig {
        seed,
        mode,
        k_main: Some(k_main),
        ..cfg.finetune
    };
    let run = train(pretrained.clone(), &cfg.finetune_task, &tcfg).and_then(|t| {
        let metric = evaluate(&t.params, &cfg.finetune_task, cfg.eval_batches, cfg.eval_batch_size, mode)?;
        Ok((metric, t.losses.last().copied()))
    });
    match run {
        Ok((metric, loss)) => SeedResult {
            seed,
            metric: Some(metric),
            final_loss: loss,
            error: None,
        },
        Err(e) => SeedResult {
            seed,
            metric: None,
            final_loss: None,
            error: Some(e.to_string()),
        },
    }
}
