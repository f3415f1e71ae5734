//! Top-k routing with a main/auxiliary split.
//!
//! Routing always takes the softmax over all `n` router logits first and then
//! keeps the `k` largest probabilities; the selected weights are therefore not
//! renormalized. Ties are broken by the lower expert index. The first `k_main`
//! selected experts are the main experts, the remaining `k_active − k_main`
//! are auxiliary.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

/// Shape and routing hyperparameters of one MoE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MoeConfig {
    pub n_experts: usize,
    pub k_active: usize,
    pub k_main: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Rescale the main-expert weights to sum to one when auxiliary experts
    /// are replaced by compressed experts.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub renormalize_main: bool,
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

impl MoeConfig {
    pub fn new(n_experts: usize, k_active: usize, k_main: usize, hidden_dim: usize, ffn_dim: usize) -> Result<Self> {
        let cfg = Self {
            n_experts,
            k_active,
            k_main,
            hidden_dim,
            ffn_dim,
            renormalize_main: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_renormalize_main(mut self, on: bool) -> Self {
        self.renormalize_main = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("hidden_dim and ffn_dim must be positive".into()));
        }
        if !(1 <= self.k_main && self.k_main <= self.k_active && self.k_active <= self.n_experts) {
            return Err(Error::Config(format!(
                "need 1 <= k_main ({}) <= k_active ({}) <= n_experts ({})",
                self.k_main, self.k_active, self.n_experts
            )));
        }
        Ok(())
    }

    /// Number of auxiliary experts, `k_active − k_main`.
    pub fn k_aux(&self) -> usize {
        self.k_active - self.k_main
    }
}

/// The routing network: a single linear map `[d×n]` from hidden state to
/// expert logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    pub weight: Tensor<T>,
}

impl<T: Real> RouterParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden_dim: usize, n_experts: usize) -> Self {
        let bound = 1.0 / num_traits::Float::sqrt(hidden_dim as f64);
        Self {
            weight: Tensor::uniform(rng, &[hidden_dim, n_experts], bound),
        }
    }

    pub fn logits(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.weight.shape()[0];
        if h.len() != d {
            return Err(Error::shape("route", h.shape(), self.weight.shape()));
        }
        tensor::matmul(&h.clone().reshape(&[1, d])?, &self.weight)
    }
}

/// Selected experts for one token, in descending routing weight.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<T> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
    pub k_main: usize,
    /// Auxiliary weights divided by their sum; empty when there are no
    /// auxiliary experts.
    pub aux_weights_normalized: Vec<T>,
}

impl<T: Real> RoutingDecision<T> {
    pub fn main_indices(&self) -> &[usize] {
        &self.indices[..self.k_main]
    }

    pub fn main_weights(&self) -> &[T] {
        &self.weights[..self.k_main]
    }

    pub fn aux_indices(&self) -> &[usize] {
        &self.indices[self.k_main..]
    }

    pub fn aux_weights(&self) -> &[T] {
        &self.weights[self.k_main..]
    }
}

/// Indices of the `k` largest entries, by value descending and then index
/// ascending.
pub fn select_top_k<T: Real>(probs: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let by_weight = |&a: &usize, &b: &usize| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, by_weight);
        order.truncate(k);
    }
    order.sort_by(by_weight);
    order
}

/// Routing decision from a probability row, selecting `k` experts of which
/// the first `k_main` are main.
pub fn decide<T: Real>(probs: &[T], k: usize, k_main: usize) -> Result<RoutingDecision<T>> {
    if !(1 <= k_main && k_main <= k && k <= probs.len()) {
        return Err(Error::Config(format!(
            "need 1 <= k_main ({k_main}) <= k ({k}) <= n ({})",
            probs.len()
        )));
    }
    let indices = select_top_k(probs, k);
    let weights: Vec<T> = indices.iter().map(|&i| probs[i]).collect();
    let aux_weights_normalized = if k > k_main {
        normalize_aux(&weights[k_main..])?
    } else {
        Vec::new()
    };
    Ok(RoutingDecision {
        indices,
        weights,
        k_main,
        aux_weights_normalized,
    })
}

/// Routes a single hidden state `h: [d]`.
pub fn route<T: Real>(h: &Tensor<T>, params: &RouterParams<T>, cfg: &MoeConfig) -> Result<RoutingDecision<T>> {
    cfg.validate()?;
    let logits = params.logits(h)?;
    route_logits(logits.data(), cfg)
}

/// Routes from precomputed router logits.
pub fn route_logits<T: Real>(logits: &[T], cfg: &MoeConfig) -> Result<RoutingDecision<T>> {
    cfg.validate()?;
    if logits.len() != cfg.n_experts {
        return Err(Error::shape("route_logits", &[logits.len()], &[cfg.n_experts]));
    }
    let mut probs = logits.to_vec();
    tensor::softmax_in_place(&mut probs);
    decide(&probs, cfg.k_active, cfg.k_main)
}

/// Divides each auxiliary weight by their sum.
pub fn normalize_aux<T: Real>(aux_weights: &[T]) -> Result<Vec<T>> {
    if aux_weights.is_empty() {
        return Err(Error::Contract(
            "normalize_aux needs at least one auxiliary weight".into(),
        ));
    }
    let s: T = aux_weights.iter().copied().sum();
    Ok(aux_weights.iter().map(|&w| w / s).collect())
}
