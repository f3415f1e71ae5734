//! Tape-free inference with per-sequence caches.
//!
//! Feeding a prompt and then one token at a time produces the same logits as
//! one forward over the whole sequence: attention keeps every key and value
//! seen so far, the mean-pool mixer keeps a running sum.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{MixerParams, ModelParams, NORM_EPS};
use crate::moe_layer::ExpertMode;
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
enum LayerCache<T> {
    /// Per sequence, row-major `[len × d]`.
    Attention { keys: Vec<Vec<T>>, values: Vec<Vec<T>> },
    /// Per sequence, the sum of all inputs so far.
    MeanPool { sums: Vec<Vec<T>> },
}

/// Cached state of a batch of sequences being decoded together.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    batch: usize,
    len: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T> DecodeState<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Tokens consumed per sequence so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Output of [`ModelParams::feed`].
#[derive(Clone, Debug)]
pub struct FeedOutput<T> {
    /// `[(batch·m) × V]` for `m` new tokens per sequence, sequence-major.
    pub logits: Tensor<T>,
    pub expert_evals: usize,
}

/// Output of [`ModelParams::generate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// `[batch × completion_len]` greedy continuations.
    pub tokens: Vec<usize>,
    pub expert_evals: usize,
}

impl<T: Real> ModelParams<T> {
    pub fn start_decode(&self, batch: usize) -> DecodeState<T> {
        let layers = self
            .blocks
            .iter()
            .map(|b| match b.mixer {
                MixerParams::Attention { .. } => LayerCache::Attention {
                    keys: vec![Vec::new(); batch],
                    values: vec![Vec::new(); batch],
                },
                MixerParams::MeanPool { .. } => LayerCache::MeanPool {
                    sums: vec![vec![T::zero(); self.cfg.hidden_dim]; batch],
                },
            })
            .collect();
        DecodeState { batch, len: 0, layers }
    }

    /// Appends `tokens` (`[batch × m]`, sequence-major) to every sequence and
    /// returns the logits at the new positions.
    pub fn feed(&self, state: &mut DecodeState<T>, tokens: &[usize], mode: ExpertMode) -> Result<FeedOutput<T>> {
        let cfg = &self.cfg;
        let batch = state.batch;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::shape("feed", &[tokens.len()], &[batch]));
        }
        let m = tokens.len() / batch;
        let p0 = state.len;
        if p0 + m > cfg.seq_len {
            return Err(Error::Index {
                what: "sequence position",
                index: p0 + m - 1,
                bound: cfg.seq_len,
            });
        }
        let positions: Vec<usize> = (0..tokens.len()).map(|i| p0 + i % m).collect();
        let tok = tensor::gather_rows(&self.embed, tokens).map_err(|e| match e {
            Error::Index { index, .. } => Error::Index {
                what: "token id",
                index,
                bound: cfg.vocab_size,
            },
            e => e,
        })?;
        let mut x = tensor::add(&tok, &tensor::gather_rows(&self.pos, &positions)?)?;
        let eps = T::of(NORM_EPS);
        let d = cfg.hidden_dim;
        let mut evals = 0;

        for (block, cache) in self.blocks.iter().zip(&mut state.layers) {
            let h = tensor::rms_norm(&x, eps);
            let mixed = match (&block.mixer, cache) {
                (MixerParams::Attention { query, key, value, output }, LayerCache::Attention { keys, values }) => {
                    let q = tensor::matmul(&h, query)?;
                    let k = tensor::matmul(&h, key)?;
                    let v = tensor::matmul(&h, value)?;
                    let scale = T::one() / T::of(d as f64).sqrt();
                    let mut heads = Vec::with_capacity(batch * m * d);
                    for s in 0..batch {
                        let rows = s * m * d..(s + 1) * m * d;
                        keys[s].extend_from_slice(&k.data()[rows.clone()]);
                        values[s].extend_from_slice(&v.data()[rows.clone()]);
                        let total = p0 + m;
                        let ks = Tensor::matrix(total, d, keys[s].clone())?;
                        let vs = Tensor::matrix(total, d, values[s].clone())?;
                        let qs = Tensor::matrix(m, d, q.data()[rows].to_vec())?;
                        let scores = tensor::matmul(&qs, &ks.transpose()?)?.map(|x| x * scale);
                        let mut probs = vec![T::zero(); m * total];
                        for i in 0..m {
                            let visible = p0 + i + 1;
                            let row = &mut probs[i * total..i * total + visible];
                            row.copy_from_slice(&scores.row(i)[..visible]);
                            tensor::softmax_in_place(row);
                        }
                        let p = Tensor::matrix(m, total, probs)?;
                        heads.extend(tensor::matmul(&p, &vs)?.into_data());
                    }
                    tensor::matmul(&Tensor::matrix(batch * m, d, heads)?, output)?
                }
                (MixerParams::MeanPool { output }, LayerCache::MeanPool { sums }) => {
                    let mut pooled = Vec::with_capacity(batch * m * d);
                    for (s, acc) in sums.iter_mut().enumerate() {
                        for i in 0..m {
                            let inv = T::one() / T::of((p0 + i + 1) as f64);
                            for (a, &v) in acc.iter_mut().zip(h.row(s * m + i)) {
                                *a += v;
                                pooled.push(*a * inv);
                            }
                        }
                    }
                    tensor::matmul(&Tensor::matrix(batch * m, d, pooled)?, output)?
                }
                _ => return Err(Error::Contract("decode cache does not match the mixer".into())),
            };
            x = tensor::add(&x, &mixed)?;
            let h = tensor::rms_norm(&x, eps);
            let (y, e) = block.moe.forward_counted(&h, mode)?;
            evals += e;
            x = tensor::add(&x, &y)?;
        }
        state.len += m;
        let logits = tensor::matmul(&tensor::rms_norm(&x, eps), &self.head)?;
        Ok(FeedOutput {
            logits,
            expert_evals: evals,
        })
    }

    /// Feeds `prompts` (`[batch × len]`) and then greedily extends every
    /// sequence by `completion_len` tokens, one position at a time.
    pub fn generate(&self, prompts: &[usize], batch: usize, completion_len: usize, mode: ExpertMode) -> Result<Generation> {
        let mut state = self.start_decode(batch);
        let first = self.feed(&mut state, prompts, mode)?;
        let m = prompts.len() / batch;
        let mut evals = first.expert_evals;
        let mut next: Vec<usize> = (0..batch).map(|s| argmax(first.logits.row(s * m + m - 1))).collect();
        let mut tokens = vec![0; batch * completion_len];
        for step in 0..completion_len {
            for (s, &t) in next.iter().enumerate() {
                tokens[s * completion_len + step] = t;
            }
            if step + 1 == completion_len {
                break;
            }
            let out = self.feed(&mut state, &next, mode)?;
            evals += out.expert_evals;
            next = (0..batch).map(|s| argmax(out.logits.row(s))).collect();
        }
        Ok(Generation {
            tokens,
            expert_evals: evals,
        })
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
