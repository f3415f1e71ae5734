//! Gated feed-forward experts and the compressed-expert bank.
//!
//! A compressed expert is a single `d`-vector standing in for a full expert.
//! For a token, the vectors of its auxiliary experts are combined with the
//! normalized auxiliary routing weights and the result scales the hidden state
//! elementwise before it enters the main experts.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

/// `E(h) = W_downᵀ (silu(W_gateᵀ h) ⊙ W_upᵀ h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Real> ExpertParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden_dim: usize, ffn_dim: usize) -> Self {
        let b_in = 1.0 / num_traits::Float::sqrt(hidden_dim as f64);
        let b_out = 1.0 / num_traits::Float::sqrt(ffn_dim as f64);
        Self {
            w_gate: Tensor::uniform(rng, &[hidden_dim, ffn_dim], b_in),
            w_up: Tensor::uniform(rng, &[hidden_dim, ffn_dim], b_in),
            w_down: Tensor::uniform(rng, &[ffn_dim, hidden_dim], b_out),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn ffn_dim(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.w_gate.len() + self.w_up.len() + self.w_down.len()
    }

    pub(crate) fn check(&self, hidden_dim: usize, ffn_dim: usize) -> Result<()> {
        let want = [[hidden_dim, ffn_dim], [hidden_dim, ffn_dim], [ffn_dim, hidden_dim]];
        for (t, w) in [&self.w_gate, &self.w_up, &self.w_down].into_iter().zip(want) {
            if t.shape() != w {
                return Err(Error::shape("expert params", t.shape(), &w));
            }
        }
        Ok(())
    }
}

/// Applies one expert to `h: [d]` (or to each row of `h: [m×d]`).
pub fn expert_forward<T: Real>(params: &ExpertParams<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let d = params.hidden_dim();
    if h.last_dim() != d {
        return Err(Error::shape("expert_forward", h.shape(), params.w_gate.shape()));
    }
    let x = h.clone().reshape(&[h.outer_len(), d])?;
    let gate = tensor::silu(&tensor::matmul(&x, &params.w_gate)?);
    let up = tensor::matmul(&x, &params.w_up)?;
    let act = tensor::mul(&gate, &up)?;
    tensor::matmul(&act, &params.w_down)?.reshape(h.shape())
}

/// One `d`-vector per full expert, stored as the rows of an `[n×d]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedExpertBank<T> {
    pub thetas: Tensor<T>,
}

impl<T: Real> CompressedExpertBank<T> {
    /// Every entry set to one.
    pub fn ones(n_experts: usize, hidden_dim: usize) -> Self {
        Self {
            thetas: Tensor::ones(&[n_experts, hidden_dim]),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.thetas.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.thetas.shape()[1]
    }

    pub fn theta(&self, i: usize) -> &[T] {
        self.thetas.row(i)
    }
}

/// Aggregated compressed expert `θ = Σ α'_i θ_i` for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationVector<T>(pub Tensor<T>);

/// Convex combination of the selected bank vectors.
///
/// The sum is divided by the weight total, which is one up to rounding for
/// normalized weights; this keeps a combination of identical vectors exactly
/// equal to that vector.
pub fn aggregate_compressed<T: Real>(
    bank: &CompressedExpertBank<T>,
    aux_indices: &[usize],
    aux_weights_normalized: &[T],
) -> Result<AugmentationVector<T>> {
    if aux_indices.is_empty() || aux_indices.len() != aux_weights_normalized.len() {
        return Err(Error::Contract(alloc::format!(
            "aggregate_compressed needs matching non-empty lists, got {} indices and {} weights",
            aux_indices.len(),
            aux_weights_normalized.len()
        )));
    }
    let total: T = aux_weights_normalized.iter().copied().sum();
    if (total.as_f64() - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(alloc::format!(
            "auxiliary weights must sum to 1, got {total}"
        )));
    }
    let n = bank.n_experts();
    let d = bank.hidden_dim();
    let mut theta: Vec<T> = alloc::vec![T::zero(); d];
    for (&i, &w) in aux_indices.iter().zip(aux_weights_normalized) {
        if i >= n {
            return Err(Error::Index {
                what: "compressed expert",
                index: i,
                bound: n,
            });
        }
        for (o, &x) in theta.iter_mut().zip(bank.theta(i)) {
            *o += w * x;
        }
    }
    theta.iter_mut().for_each(|v| *v /= total);
    Ok(AugmentationVector(Tensor::from_vec(theta)?))
}

/// `h ⊙ θ`.
pub fn augment<T: Real>(h: &Tensor<T>, theta: &AugmentationVector<T>) -> Result<Tensor<T>> {
    if h.shape() != theta.0.shape() {
        return Err(Error::shape("augment", h.shape(), theta.0.shape()));
    }
    tensor::mul(h, &theta.0)
}
