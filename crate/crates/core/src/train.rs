//! Training loop and exact-match evaluation on synthetic tasks.

use alloc::vec::Vec;

use crate::decode::argmax;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::moe_layer::{BindOptions, ExpertMode};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, CosineSchedule};
use crate::tape::Tape;
use crate::task::SyntheticTask;

/// Consecutive steps above the divergence threshold before training aborts.
pub const DIVERGENCE_WINDOW: usize = 100;
/// Loss multiple of the first step's loss that counts as diverging.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Cosine horizon in steps; `None` means `steps`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub horizon: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub lr_floor: f64,
    /// Seeds model initialization in workflows that build the model.
    pub seed: u64,
    pub mode: ExpertMode,
    /// Overrides the model's `k_main` before training.
    #[cfg_attr(feature = "serde", serde(default))]
    pub k_main: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    #[cfg_attr(feature = "serde", serde(default = "default_clip"))]
    pub clip_norm: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub freeze_router: bool,
}

#[cfg(feature = "serde")]
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            base_lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            horizon: None,
            lr_floor: 0.0,
            seed: 0,
            mode: ExpertMode::Full,
            k_main: None,
            clip_norm: Some(1.0),
            freeze_router: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0 && self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.adam_eps > 0.0;
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        let clip = self.clip_norm.is_none_or(|c| c > 0.0);
        if !(positive && betas && clip && self.lr_floor >= 0.0 && self.lr_floor <= self.base_lr) {
            return Err(Error::Config(alloc::format!("invalid training config: {self:?}")));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base: self.base_lr,
            floor: self.lr_floor,
            horizon: self.horizon.unwrap_or(self.steps),
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams<f64>,
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

/// Whether a parameter receives weight decay. The compressed bank is
/// initialized at one, so decaying it would pull the augmentation away from
/// the identity.
pub fn decays(name: &str) -> bool {
    !name.ends_with(".bank")
}

/// Trains `params` on `task` with teacher forcing; the loss is the mean
/// cross-entropy over answer tokens only.
///
/// Batches come from the task's own stream, so two runs with the same
/// parameters, task and config are identical bit for bit.
pub fn train(mut params: ModelParams<f64>, task: &SyntheticTask, tcfg: &TrainConfig) -> Result<Trained> {
    tcfg.validate()?;
    task.validate()?;
    if let Some(k) = tcfg.k_main {
        params.set_k_main(k)?;
    }
    if task.vocab_size > params.cfg.vocab_size || task.input_len() > params.cfg.seq_len {
        return Err(Error::Config(alloc::format!(
            "task (V={}, input length {}) does not fit the model (V={}, seq_len {})",
            task.vocab_size,
            task.input_len(),
            params.cfg.vocab_size,
            params.cfg.seq_len
        )));
    }
    let names: Vec<_> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    let mut opt = AdamW::new(tcfg.adamw(), &params.named_tensors(), &decay)?;
    let schedule = tcfg.schedule();
    let opts = BindOptions {
        grads: true,
        freeze_router: tcfg.freeze_router,
    };

    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut above = 0usize;
    for step in 0..tcfg.steps {
        let batch = task.sample_batch(tcfg.batch_size, step as u64);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, opts);
        let fwd = params.forward(&mut tape, &vars, &batch.inputs, batch.batch, tcfg.mode)?;
        let answers = tape.gather_rows(fwd.logits, batch.answer_positions())?;
        let loss = tape.cross_entropy(answers, batch.targets.clone())?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<_> = vars.flat().into_iter().map(|v| grads.take(v)).collect();
        drop(tape);

        if let Some(c) = tcfg.clip_norm {
            clip_global_norm(&mut g, c);
        }
        opt.step(&mut params.tensors_mut(), &g, schedule.lr(step), step)?;

        losses.push(value);
        let initial = losses[0];
        if !value.is_finite() || value > DIVERGENCE_FACTOR * initial {
            above += 1;
        } else {
            above = 0;
        }
        if above >= DIVERGENCE_WINDOW {
            return Err(Error::Diverged {
                step,
                loss: value,
                initial,
                window: DIVERGENCE_WINDOW,
            });
        }
    }
    Ok(Trained { params, losses })
}

/// Exact-match accuracy over answer tokens of `n_batches` held-out batches,
/// predicting each answer token by argmax under teacher forcing.
pub fn evaluate(
    params: &ModelParams<f64>,
    task: &SyntheticTask,
    n_batches: usize,
    batch_size: usize,
    mode: ExpertMode,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..n_batches {
        let batch = task.eval_batch(batch_size, i as u64);
        let logits = params.logits(&batch.inputs, batch.batch, mode)?;
        let v = params.cfg.vocab_size;
        for (&pos, &target) in batch.answer_positions().iter().zip(&batch.targets) {
            hits += usize::from(argmax(&logits.data()[pos * v..(pos + 1) * v]) == target);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config("evaluation needs at least one batch".into()));
    }
    Ok(hits as f64 / total as f64)
}
