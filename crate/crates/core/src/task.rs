//! Synthetic sequence tasks.
//!
//! Every sequence is `x_1 … x_L SEP y_1 … y_A`, where the `x_i` are content
//! tokens drawn uniformly from `0..V-1` and `SEP = V-1`. The model reads the
//! sequence shifted by one, so the position holding `SEP` predicts `y_1`.
//!
//! * copy: `y = x`
//! * reverse: `y = x` reversed
//! * modular-sum: a single answer `y_1 = (Σ x_i) mod (V-1)`

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Number of content tokens `L` before the separator.
    pub seq_len: usize,
    pub seed: u64,
}

/// A batch of task sequences, row-major `[batch × input_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub batch: usize,
    pub input_len: usize,
    /// Input position whose prediction is the first answer token.
    pub answer_start: usize,
    /// Answer labels, row-major `[batch × answer_len]`.
    pub targets: Vec<usize>,
    pub answer_len: usize,
}

impl Batch {
    /// Flat input positions (`row·input_len + pos`) that predict answers, in
    /// the same order as `targets`.
    pub fn answer_positions(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (0..self.answer_len).map(move |j| b * self.input_len + self.answer_start + j))
            .collect()
    }
}

/// Streams below this value are training steps; evaluation uses the rest.
const EVAL_STREAM_BASE: u64 = 1 << 48;

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let task = Self {
            kind,
            vocab_size,
            seq_len,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.seq_len == 0 {
            return Err(Error::Config(alloc::format!(
                "task needs vocab_size >= 3 and seq_len >= 1, got {} and {}",
                self.vocab_size,
                self.seq_len
            )));
        }
        Ok(())
    }

    pub fn sep_token(&self) -> usize {
        self.vocab_size - 1
    }

    /// Number of distinct content tokens.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn answer_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => self.seq_len,
            TaskKind::ModularSum => 1,
        }
    }

    /// Length of the model input (full sequence minus its last token).
    pub fn input_len(&self) -> usize {
        self.seq_len + self.answer_len()
    }

    pub fn answer(&self, content: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => content.to_vec(),
            TaskKind::Reverse => content.iter().rev().copied().collect(),
            TaskKind::ModularSum => alloc::vec![content.iter().sum::<usize>() % self.content_vocab()],
        }
    }

    /// Training batch for `step`; identical for identical `(seed, step)`.
    pub fn sample_batch(&self, batch: usize, step: u64) -> Batch {
        self.batch_from_stream(batch, step)
    }

    /// Held-out batch `index`, drawn from a stream disjoint from training.
    pub fn eval_batch(&self, batch: usize, index: u64) -> Batch {
        self.batch_from_stream(batch, EVAL_STREAM_BASE + index)
    }

    fn batch_from_stream(&self, batch: usize, stream: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let l = self.seq_len;
        let a = self.answer_len();
        let t = self.input_len();
        let mut inputs = Vec::with_capacity(batch * t);
        let mut targets = Vec::with_capacity(batch * a);
        for _ in 0..batch {
            let content: Vec<usize> = (0..l).map(|_| rng.gen_range(0..self.content_vocab())).collect();
            let answer = self.answer(&content);
            inputs.extend_from_slice(&content);
            inputs.push(self.sep_token());
            inputs.extend_from_slice(&answer[..a - 1]);
            targets.extend(answer);
        }
        Batch {
            inputs,
            batch,
            input_len: t,
            answer_start: l,
            targets,
            answer_len: a,
        }
    }
}
