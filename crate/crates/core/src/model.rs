//! A small decoder-only language model whose feed-forward sublayers are MoE
//! layers.
//!
//! Each block is pre-norm: `x += mix(norm(x))`, then `x += moe(norm(x))`.
//! Normalization is a gain-free RMS norm; the token-mixing sublayer is either
//! causal single-head attention or a causal running mean, both followed by an
//! output projection. Positions are learned absolute embeddings.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moe_layer::{bind_tensor, BindOptions, ExpertMode, LayerVars, MoeLayerParams};
use crate::router::MoeConfig;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Mixing {
    Attention,
    MeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Maximum input length (number of position embeddings).
    pub seq_len: usize,
    pub moe: MoeConfig,
    pub mixing: Mixing,
}

impl ModelConfig {
    /// V=32, d=64, f=128, two layers, 8 experts with 4 active.
    pub fn desk_default() -> Self {
        Self {
            vocab_size: 32,
            hidden_dim: 64,
            n_layers: 2,
            seq_len: 16,
            moe: MoeConfig {
                n_experts: 8,
                k_active: 4,
                k_main: 2,
                hidden_dim: 64,
                ffn_dim: 128,
                renormalize_main: true,
            },
            mixing: Mixing::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.n_layers == 0 || self.seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.moe.hidden_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "moe.hidden_dim ({}) must equal hidden_dim ({})",
                self.moe.hidden_dim, self.hidden_dim
            )));
        }
        self.moe.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerParams<T> {
    Attention {
        query: Tensor<T>,
        key: Tensor<T>,
        value: Tensor<T>,
        output: Tensor<T>,
    },
    MeanPool {
        output: Tensor<T>,
    },
}

impl<T: Real> MixerParams<T> {
    fn init<R: Rng + ?Sized>(rng: &mut R, kind: Mixing, d: usize) -> Self {
        let b = 1.0 / num_traits::Float::sqrt(d as f64);
        match kind {
            Mixing::Attention => MixerParams::Attention {
                query: Tensor::uniform(rng, &[d, d], b),
                key: Tensor::uniform(rng, &[d, d], b),
                value: Tensor::uniform(rng, &[d, d], b),
                output: Tensor::uniform(rng, &[d, d], b),
            },
            Mixing::MeanPool => MixerParams::MeanPool {
                output: Tensor::uniform(rng, &[d, d], b),
            },
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            MixerParams::Attention {
                query,
                key,
                value,
                output,
            } => alloc::vec![("query", query), ("key", key), ("value", value), ("output", output)],
            MixerParams::MeanPool { output } => alloc::vec![("output", output)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            MixerParams::Attention {
                query,
                key,
                value,
                output,
            } => alloc::vec![query, key, value, output],
            MixerParams::MeanPool { output } => alloc::vec![output],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub mixer: MixerParams<T>,
    pub moe: MoeLayerParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Tensor<T>,
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<(Vec<Var>, LayerVars)>,
    pub head: Var,
}

impl ModelVars {
    /// Handles in the order of [`ModelParams::named_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = alloc::vec![self.embed, self.pos];
        for (mix, moe) in &self.blocks {
            out.extend_from_slice(mix);
            out.extend(moe.flat());
        }
        out.push(self.head);
        out
    }
}

/// Result of a batched model forward on a tape.
#[derive(Debug)]
pub struct ModelForward {
    /// Logits `[(batch·len) × V]`.
    pub logits: Var,
    pub expert_evals: usize,
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        let embed = Tensor::uniform(&mut rng, &[cfg.vocab_size, d], 1.0);
        let pos = Tensor::uniform(&mut rng, &[cfg.seq_len, d], 0.5);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mixer = MixerParams::init(&mut rng, cfg.mixing, d);
            let moe = MoeLayerParams::init(cfg.moe, &mut rng)?;
            blocks.push(Block { mixer, moe });
        }
        let head = Tensor::uniform(&mut rng, &[d, cfg.vocab_size], 1.0 / num_traits::Float::sqrt(d as f64));
        Ok(Self {
            cfg,
            embed,
            pos,
            blocks,
            head,
        })
    }

    /// Changes the number of main experts in every layer.
    pub fn set_k_main(&mut self, k_main: usize) -> Result<()> {
        let mut moe = self.cfg.moe;
        moe.k_main = k_main;
        moe.validate()?;
        self.set_moe_config(moe);
        Ok(())
    }

    pub fn set_moe_config(&mut self, moe: MoeConfig) {
        self.cfg.moe = moe;
        for b in &mut self.blocks {
            b.moe.cfg = moe;
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg,
            embed: self.embed.cast(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    mixer: match &b.mixer {
                        MixerParams::Attention {
                            query,
                            key,
                            value,
                            output,
                        } => MixerParams::Attention {
                            query: query.cast(),
                            key: key.cast(),
                            value: value.cast(),
                            output: output.cast(),
                        },
                        MixerParams::MeanPool { output } => MixerParams::MeanPool { output: output.cast() },
                    },
                    moe: MoeLayerParams {
                        cfg: b.moe.cfg,
                        router: crate::router::RouterParams {
                            weight: b.moe.router.weight.cast(),
                        },
                        experts: b
                            .moe
                            .experts
                            .iter()
                            .map(|e| crate::experts::ExpertParams {
                                w_gate: e.w_gate.cast(),
                                w_up: e.w_up.cast(),
                                w_down: e.w_down.cast(),
                            })
                            .collect(),
                        bank: crate::experts::CompressedExpertBank {
                            thetas: b.moe.bank.thetas.cast(),
                        },
                    },
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    /// Every parameter tensor with a dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = alloc::vec![(String::from("embed"), &self.embed), (String::from("pos"), &self.pos)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.mixer.tensors() {
                out.push((format!("block{i}.mix.{name}"), t));
            }
            for (name, t) in b.moe.tensors() {
                out.push((format!("block{i}.moe.{name}"), t));
            }
        }
        out.push((String::from("head"), &self.head));
        out
    }

    /// Mutable tensors in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = alloc::vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.mixer.tensors_mut());
            out.extend(b.moe.tensors_mut());
        }
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds [`ModelVars`] from handles in [`ModelVars::flat`] order.
    pub fn vars_from_flat(&self, vars: &[Var]) -> Result<ModelVars> {
        let want = self.named_tensors().len();
        if vars.len() != want {
            return Err(Error::shape("vars_from_flat", &[vars.len()], &[want]));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let pos = next();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mix = (0..b.mixer.tensors().len()).map(|_| next()).collect();
            let router = next();
            let experts = (0..b.moe.experts.len()).map(|_| [next(), next(), next()]).collect();
            let bank = next();
            blocks.push((mix, LayerVars { router, experts, bank }));
        }
        let head = next();
        Ok(ModelVars {
            embed,
            pos,
            blocks,
            head,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, opts: BindOptions) -> ModelVars {
        let g = opts.grads;
        let embed = bind_tensor(tape, &self.embed, g);
        let pos = bind_tensor(tape, &self.pos, g);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mix = b.mixer.tensors().into_iter().map(|(_, t)| bind_tensor(tape, t, g)).collect();
                (mix, b.moe.bind(tape, opts))
            })
            .collect();
        let head = bind_tensor(tape, &self.head, g);
        ModelVars {
            embed,
            pos,
            blocks,
            head,
        }
    }

    /// Logits for `tokens`, row-major `[batch × len]`, on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        tokens: &[usize],
        batch: usize,
        mode: ExpertMode,
    ) -> Result<ModelForward> {
        let cfg = &self.cfg;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::shape("model_forward", &[tokens.len()], &[batch]));
        }
        let len = tokens.len() / batch;
        if len > cfg.seq_len {
            return Err(Error::Index {
                what: "sequence position",
                index: len - 1,
                bound: cfg.seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        let eps = T::of(NORM_EPS);
        let tok = tape.gather_rows(vars.embed, tokens.to_vec())?;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % len).collect();
        let pos = tape.gather_rows(vars.pos, positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut evals = 0;

        for (block, (mix_vars, moe_vars)) in self.blocks.iter().zip(&vars.blocks) {
            let h = tape.rms_norm(x, eps);
            let m = mix(tape, &block.mixer, mix_vars, h, batch, len)?;
            x = tape.add(x, m)?;
            let h = tape.rms_norm(x, eps);
            let out = block.moe.forward(tape, moe_vars, h, mode)?;
            evals += out.expert_evals;
            x = tape.add(x, out.output)?;
        }
        let h = tape.rms_norm(x, eps);
        let logits = tape.matmul(h, vars.head)?;
        Ok(ModelForward {
            logits,
            expert_evals: evals,
        })
    }

    /// Inference-only forward returning logits shaped `[batch × len × V]`.
    pub fn logits(&self, tokens: &[usize], batch: usize, mode: ExpertMode) -> Result<Tensor<T>> {
        let mut state = self.start_decode(batch);
        let out = self.feed(&mut state, tokens, mode)?;
        let len = tokens.len() / batch;
        out.logits.reshape(&[batch, len, self.cfg.vocab_size])
    }
}

fn mix<T: Real>(
    tape: &mut Tape<T>,
    params: &MixerParams<T>,
    vars: &[Var],
    h: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    match params {
        MixerParams::Attention { .. } => {
            let [wq, wk, wv, wo] = [vars[0], vars[1], vars[2], vars[3]];
            let d = tape.value(h).last_dim();
            let scale = T::one() / T::of(d as f64).sqrt();
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(batch);
            for s in 0..batch {
                let (lo, hi) = (s * len, (s + 1) * len);
                let qs = tape.slice_rows(q, lo, hi)?;
                let ks = tape.slice_rows(k, lo, hi)?;
                let vs = tape.slice_rows(v, lo, hi)?;
                let kt = tape.transpose(ks)?;
                let scores = tape.matmul(qs, kt)?;
                let scores = tape.scale(scores, scale);
                let p = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(p, vs)?);
            }
            let cat = tape.concat_rows(&heads)?;
            tape.matmul(cat, wo)
        }
        MixerParams::MeanPool { .. } => {
            let pooled = tape.causal_mean(h, len)?;
            tape.matmul(pooled, vars[0])
        }
    }
}
