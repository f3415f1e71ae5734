//! The MoE layer in full top-k mode and in compressed-expert mode.
//!
//! The batched forward groups tokens per selected expert, so each expert runs
//! one matmul chain over all of its tokens. Experts nobody selected are never
//! evaluated. A per-token reference path, written as a straight transcription
//! of the routing, aggregation and augmentation steps, is kept alongside for
//! equivalence testing.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::{self, CompressedExpertBank, ExpertParams};
use crate::router::{self, MoeConfig, RouterParams, RoutingDecision};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// How the selected experts are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ExpertMode {
    /// Top-`k_active`: every selected expert is evaluated.
    Full,
    /// Top-`k_main` with no compensation for the dropped experts.
    Halved,
    /// Top-`k_main` main experts on a hidden state augmented by the
    /// compressed vectors of the `k_aux` auxiliary experts.
    Compressed,
}

impl ExpertMode {
    /// `(experts selected, experts evaluated)` per token.
    pub fn selection(self, cfg: &MoeConfig) -> (usize, usize) {
        match self {
            ExpertMode::Full => (cfg.k_active, cfg.k_active),
            ExpertMode::Halved => (cfg.k_main, cfg.k_main),
            ExpertMode::Compressed => (cfg.k_active, cfg.k_main),
        }
    }

    fn renormalizes(self, cfg: &MoeConfig) -> bool {
        self == ExpertMode::Compressed && cfg.k_aux() > 0 && cfg.renormalize_main
    }
}

/// Number of expert evaluations for `tokens` tokens.
pub fn count_expert_invocations(mode: ExpertMode, cfg: &MoeConfig, tokens: usize) -> usize {
    tokens * mode.selection(cfg).1
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayerParams<T> {
    pub cfg: MoeConfig,
    pub router: RouterParams<T>,
    pub experts: Vec<ExpertParams<T>>,
    pub bank: CompressedExpertBank<T>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub router: Var,
    pub experts: Vec<[Var; 3]>,
    pub bank: Var,
}

impl LayerVars {
    /// Handles in the same order as [`MoeLayerParams::tensors`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.router];
        for e in &self.experts {
            out.extend_from_slice(e);
        }
        out.push(self.bank);
        out
    }
}

/// Which parameter groups become differentiable leaves when binding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BindOptions {
    pub grads: bool,
    pub freeze_router: bool,
}

impl BindOptions {
    pub const TRAIN: Self = Self {
        grads: true,
        freeze_router: false,
    };
    pub const INFERENCE: Self = Self {
        grads: false,
        freeze_router: false,
    };
}

pub(crate) fn bind_tensor<T: Real>(tape: &mut Tape<T>, t: &Tensor<T>, grad: bool) -> Var {
    if grad {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Output of one batched layer forward.
#[derive(Debug)]
pub struct LayerForward<T> {
    pub output: Var,
    pub expert_evals: usize,
    pub decisions: Vec<RoutingDecision<T>>,
}

impl<T: Real> MoeLayerParams<T> {
    /// Random router and experts, ones-initialized compressed bank.
    pub fn init<R: Rng + ?Sized>(cfg: MoeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let router = RouterParams::init(rng, cfg.hidden_dim, cfg.n_experts);
        let experts = (0..cfg.n_experts)
            .map(|_| ExpertParams::init(rng, cfg.hidden_dim, cfg.ffn_dim))
            .collect();
        Ok(Self {
            cfg,
            router,
            experts,
            bank: CompressedExpertBank::ones(cfg.n_experts, cfg.hidden_dim),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        c.validate()?;
        if self.experts.len() != c.n_experts {
            return Err(Error::Config(alloc::format!(
                "{} experts for n_experts = {}",
                self.experts.len(),
                c.n_experts
            )));
        }
        if self.router.weight.shape() != [c.hidden_dim, c.n_experts] {
            return Err(Error::shape("router", self.router.weight.shape(), &[c.hidden_dim, c.n_experts]));
        }
        if self.bank.thetas.shape() != [c.n_experts, c.hidden_dim] {
            return Err(Error::shape("bank", self.bank.thetas.shape(), &[c.n_experts, c.hidden_dim]));
        }
        self.experts.iter().try_for_each(|e| e.check(c.hidden_dim, c.ffn_dim))
    }

    /// Parameter tensors as `(name, tensor)`: router, then each expert's
    /// gate/up/down, then the bank.
    pub fn tensors(&self) -> Vec<(alloc::string::String, &Tensor<T>)> {
        let mut out = vec![("router".into(), &self.router.weight)];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((alloc::format!("expert{i}.w_gate"), &e.w_gate));
            out.push((alloc::format!("expert{i}.w_up"), &e.w_up));
            out.push((alloc::format!("expert{i}.w_down"), &e.w_down));
        }
        out.push(("bank".into(), &self.bank.thetas));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.router.weight];
        for e in &mut self.experts {
            out.push(&mut e.w_gate);
            out.push(&mut e.w_up);
            out.push(&mut e.w_down);
        }
        out.push(&mut self.bank.thetas);
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>, opts: BindOptions) -> LayerVars {
        let router = bind_tensor(tape, &self.router.weight, opts.grads && !opts.freeze_router);
        let experts = self
            .experts
            .iter()
            .map(|e| {
                [
                    bind_tensor(tape, &e.w_gate, opts.grads),
                    bind_tensor(tape, &e.w_up, opts.grads),
                    bind_tensor(tape, &e.w_down, opts.grads),
                ]
            })
            .collect();
        let bank = bind_tensor(tape, &self.bank.thetas, opts.grads);
        LayerVars { router, experts, bank }
    }

    /// Batched forward of `h: [t×d]` on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &LayerVars, h: Var, mode: ExpertMode) -> Result<LayerForward<T>> {
        let cfg = &self.cfg;
        let (t, d) = tape.value(h).dims2("moe_layer")?;
        if d != cfg.hidden_dim {
            return Err(Error::shape("moe_layer", tape.shape(h), &[t, cfg.hidden_dim]));
        }
        let n = cfg.n_experts;
        let (k_sel, k_eval) = mode.selection(cfg);
        let k_aux = k_sel - k_eval;

        let logits = tape.matmul(h, vars.router)?;
        let probs = tape.softmax(logits);
        let decisions = {
            let pv = tape.value(probs);
            (0..t)
                .map(|r| router::decide(pv.row(r), k_sel, k_eval))
                .collect::<Result<Vec<_>>>()?
        };

        let main_pos: Vec<usize> = decisions
            .iter()
            .enumerate()
            .flat_map(|(r, dec)| dec.main_indices().iter().map(move |&e| r * n + e))
            .collect();
        let main_w = tape.gather_elems(probs, main_pos)?;
        let main_w = tape.reshape(main_w, &[t, k_eval])?;
        let main_w = if mode.renormalizes(cfg) {
            tape.row_normalize(main_w)
        } else {
            main_w
        };

        let x = if mode == ExpertMode::Compressed && k_aux > 0 {
            let mut aux_pos = Vec::with_capacity(t * k_aux);
            let mut aux_idx = Vec::with_capacity(t * k_aux);
            for (r, dec) in decisions.iter().enumerate() {
                for &e in dec.aux_indices() {
                    aux_pos.push(r * n + e);
                    aux_idx.push(e);
                }
            }
            let aux_w = tape.gather_elems(probs, aux_pos)?;
            let aux_w = tape.reshape(aux_w, &[t, k_aux])?;
            let alpha = tape.row_normalize(aux_w);
            let theta = tape.mix_rows(vars.bank, alpha, aux_idx)?;
            tape.mul(h, theta)?
        } else {
            h
        };

        // tokens[e] = (token row, slot among that token's main experts)
        let mut tokens: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (r, dec) in decisions.iter().enumerate() {
            for (slot, &e) in dec.main_indices().iter().enumerate() {
                tokens[e].push((r, slot));
            }
        }

        let mut output: Option<Var> = None;
        let mut evals = 0;
        for (e, group) in tokens.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            evals += group.len();
            let rows: Vec<usize> = group.iter().map(|&(r, _)| r).collect();
            let [w_gate, w_up, w_down] = vars.experts[e];
            let xe = tape.gather_rows(x, rows.clone())?;
            let g = tape.matmul(xe, w_gate)?;
            let g = tape.silu(g);
            let u = tape.matmul(xe, w_up)?;
            let a = tape.mul(g, u)?;
            let o = tape.matmul(a, w_down)?;
            let we = tape.gather_elems(main_w, group.iter().map(|&(r, s)| r * k_eval + s).collect())?;
            let o = tape.scale_rows(o, we)?;
            let o = tape.scatter_rows(o, rows, t)?;
            output = Some(match output {
                Some(acc) => tape.add(acc, o)?,
                None => o,
            });
        }

        Ok(LayerForward {
            output: output.expect("every token selects at least one expert"),
            expert_evals: evals,
            decisions,
        })
    }

    /// Batched forward on plain tensors, without a tape. Returns the output
    /// and the number of expert evaluations. Performs the same operations in
    /// the same order as [`Self::forward`].
    pub fn forward_counted(&self, h: &Tensor<T>, mode: ExpertMode) -> Result<(Tensor<T>, usize)> {
        let cfg = &self.cfg;
        let (t, d) = h.dims2("moe_layer")?;
        if d != cfg.hidden_dim {
            return Err(Error::shape("moe_layer", h.shape(), &[t, cfg.hidden_dim]));
        }
        let (k_sel, k_eval) = mode.selection(cfg);
        let k_aux = k_sel - k_eval;
        let probs = tensor::softmax_lastdim(&tensor::matmul(h, &self.router.weight)?);
        let decisions = (0..t)
            .map(|r| router::decide(probs.row(r), k_sel, k_eval))
            .collect::<Result<Vec<_>>>()?;

        let main_w: Vec<T> = decisions.iter().flat_map(|dec| dec.main_weights().iter().copied()).collect();
        let mut main_w = Tensor::matrix(t, k_eval, main_w)?;
        if mode.renormalizes(cfg) {
            main_w = tensor::row_normalize(&main_w);
        }

        let x = if mode == ExpertMode::Compressed && k_aux > 0 {
            let aux_w: Vec<T> = decisions.iter().flat_map(|dec| dec.aux_weights().iter().copied()).collect();
            let aux_idx: Vec<usize> = decisions.iter().flat_map(|dec| dec.aux_indices().iter().copied()).collect();
            let alpha = tensor::row_normalize(&Tensor::matrix(t, k_aux, aux_w)?);
            let theta = tensor::mix_rows(&self.bank.thetas, &alpha, &aux_idx)?;
            tensor::mul(h, &theta)?
        } else {
            h.clone()
        };

        let mut tokens: Vec<Vec<(usize, usize)>> = vec![Vec::new(); cfg.n_experts];
        for (r, dec) in decisions.iter().enumerate() {
            for (slot, &e) in dec.main_indices().iter().enumerate() {
                tokens[e].push((r, slot));
            }
        }
        let mut out = Tensor::zeros(&[t, d]);
        let mut evals = 0;
        for (e, group) in tokens.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            evals += group.len();
            let rows: Vec<usize> = group.iter().map(|&(r, _)| r).collect();
            let y = experts::expert_forward(&self.experts[e], &tensor::gather_rows(&x, &rows)?)?;
            let buf = out.data_mut();
            for (i, &(r, slot)) in group.iter().enumerate() {
                let w = main_w.data()[r * k_eval + slot];
                for (o, &v) in buf[r * d..(r + 1) * d].iter_mut().zip(y.row(i)) {
                    *o += v * w;
                }
            }
        }
        Ok((out, evals))
    }

    /// `y = Σ α_i·E_i(h)` over the top-`k_active` experts of every row.
    pub fn forward_full(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_counted(h, ExpertMode::Full)?.0)
    }

    /// Compressed-expert forward of every row.
    pub fn forward_ce(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_counted(h, ExpertMode::Compressed)?.0)
    }

    /// Token-by-token transcription of routing, aggregation, augmentation and
    /// main-expert evaluation. Slow; used to check the batched path.
    pub fn forward_reference(&self, h: &Tensor<T>, mode: ExpertMode) -> Result<(Tensor<T>, usize)> {
        let (t, d) = h.dims2("forward_reference")?;
        let (k_sel, k_eval) = mode.selection(&self.cfg);
        let mut route_cfg = self.cfg;
        route_cfg.k_active = k_sel;
        route_cfg.k_main = k_eval;
        let mut out = Vec::with_capacity(t * d);
        let mut evals = 0;
        for r in 0..t {
            let token = Tensor::from_vec(h.row(r).to_vec())?;
            let dec = router::route(&token, &self.router, &route_cfg)?;
            let input = if mode == ExpertMode::Compressed && k_sel > k_eval {
                let theta = experts::aggregate_compressed(&self.bank, dec.aux_indices(), &dec.aux_weights_normalized)?;
                experts::augment(&token, &theta)?
            } else {
                token
            };
            let weights: Vec<T> = if mode.renormalizes(&self.cfg) {
                let s: T = dec.main_weights().iter().copied().sum();
                dec.main_weights().iter().map(|&w| w / s).collect()
            } else {
                dec.main_weights().to_vec()
            };
            let mut y = vec![T::zero(); d];
            for (&e, &w) in dec.main_indices().iter().zip(&weights) {
                let ye = experts::expert_forward(&self.experts[e], &input)?;
                evals += 1;
                for (o, &v) in y.iter_mut().zip(ye.data()) {
                    *o += w * v;
                }
            }
            out.extend(y);
        }
        Ok((Tensor::matrix(t, d, out)?, evals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(n: usize, k: usize, km: usize, seed: u64) -> MoeLayerParams<f64> {
        let cfg = MoeConfig::new(n, k, km, 6, 5).unwrap().with_renormalize_main(false);
        MoeLayerParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_expert_is_that_expert() {
        let p = layer(1, 1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::uniform(&mut rng, &[3, 6], 1.0);
        let y = p.forward_full(&h).unwrap();
        let want = experts::expert_forward(&p.experts[0], &h).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn identical_experts_with_k_equal_n() {
        let mut p = layer(4, 4, 2, 3);
        let e0 = p.experts[0].clone();
        p.experts.iter_mut().for_each(|e| *e = e0.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::uniform(&mut rng, &[5, 6], 1.0);
        let y = p.forward_full(&h).unwrap();
        let want = experts::expert_forward(&e0, &h).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn full_matches_evaluate_all_and_mask() {
        let p = layer(4, 2, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::uniform(&mut rng, &[1, 6], 1.0);
        // Evaluate every expert, then keep the two largest softmax weights.
        let logits = crate::tensor::matmul(&h, &p.router.weight).unwrap();
        let probs = crate::tensor::softmax_lastdim(&logits);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| probs.data()[b].partial_cmp(&probs.data()[a]).unwrap());
        let mut want = vec![0.0; 6];
        for e in 0..4 {
            let mask = if order[..2].contains(&e) { probs.data()[e] } else { 0.0 };
            let ye = experts::expert_forward(&p.experts[e], &h).unwrap();
            for (w, v) in want.iter_mut().zip(ye.data()) {
                *w += mask * v;
            }
        }
        let got = p.forward_full(&h).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_reduces_to_full_without_aux() {
        let mut p = layer(4, 2, 2, 7);
        p.cfg.renormalize_main = true;
        p.bank.thetas = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(1), &[4, 6], 2.0);
        let h = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(8), &[7, 6], 1.0);
        assert_eq!(p.forward_ce(&h).unwrap(), p.forward_full(&h).unwrap());
    }

    #[test]
    fn invocation_counts() {
        let cfg = MoeConfig::new(8, 2, 1, 4, 4).unwrap();
        assert_eq!(count_expert_invocations(ExpertMode::Full, &cfg, 10), 20);
        assert_eq!(count_expert_invocations(ExpertMode::Compressed, &cfg, 10), 10);
        let cfg = MoeConfig::new(8, 8, 4, 4, 4).unwrap();
        assert_eq!(count_expert_invocations(ExpertMode::Compressed, &cfg, 5), 20);
        assert_eq!(count_expert_invocations(ExpertMode::Halved, &cfg, 5), 20);
    }

    #[test]
    fn batched_matches_reference() {
        for (mode, renorm) in [
            (ExpertMode::Full, false),
            (ExpertMode::Halved, false),
            (ExpertMode::Compressed, false),
            (ExpertMode::Compressed, true),
        ] {
            let mut p = layer(6, 4, 2, 9);
            p.cfg.renormalize_main = renorm;
            p.bank.thetas = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(10), &[6, 6], 2.0);
            let h = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(11), &[9, 6], 1.0);
            let (a, na) = p.forward_counted(&h, mode).unwrap();
            let (b, nb) = p.forward_reference(&h, mode).unwrap();
            assert_eq!(na, nb);
            assert!(a.max_abs_diff(&b) < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        for mode in [ExpertMode::Full, ExpertMode::Halved, ExpertMode::Compressed] {
            let mut p = layer(6, 4, 2, 12);
            p.cfg.renormalize_main = true;
            p.bank.thetas = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(13), &[6, 6], 2.0);
            let h = Tensor::uniform(&mut ChaCha8Rng::seed_from_u64(14), &[9, 6], 1.0);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, BindOptions::TRAIN);
            let hv = tape.constant(h.clone());
            let out = p.forward(&mut tape, &vars, hv, mode).unwrap();
            let (plain, evals) = p.forward_counted(&h, mode).unwrap();
            assert_eq!(tape.value(out.output), &plain, "{mode:?}");
            assert_eq!(out.expert_evals, evals);
        }
    }

    #[test]
    fn rejects_wrong_hidden_size() {
        let p = layer(4, 2, 1, 1);
        assert!(p.forward_full(&Tensor::zeros(&[2, 5])).is_err());
    }
}
