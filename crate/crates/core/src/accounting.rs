//! Active-parameter arithmetic for MoE geometries.
//!
//! All counts are exact integers computed in `u128` and rejected if they do
//! not fit in an `i64`. Floating point appears only in the saving ratio.
//!
//! Two compressed-expert counts are reported. The *paper* form is
//! `3·(d·f·k_m + 2d + f)·L`, with the compressed-expert addend inside the
//! tripled per-layer product. The *strict* form counts what the mechanism
//! actually stores and reads: the main experts' matrices plus one `d`-vector
//! per expert and layer, `3·d·f·k_m·L + n·d·L`.

use alloc::string::String;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ArchSpec {
    pub name: String,
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub n_moe_layers: u64,
    pub n_experts: u64,
    pub k_active: u64,
    pub k_main: u64,
    /// Attention, embedding and other always-active parameters; supplied,
    /// never derived.
    pub non_moe_params: u64,
    #[cfg_attr(feature = "serde", serde(default = "three"))]
    pub matrices_per_expert: u64,
}

#[cfg(feature = "serde")]
fn three() -> u64 {
    3
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden_dim, self.ffn_dim, self.n_moe_layers, self.n_experts, self.k_active, self.k_main];
        if dims.contains(&0) {
            return Err(Error::Config(alloc::format!("{}: dimensions must be positive", self.name)));
        }
        if self.matrices_per_expert != 3 {
            return Err(Error::Config(alloc::format!(
                "{}: experts have 3 weight matrices, got {}",
                self.name, self.matrices_per_expert
            )));
        }
        if !(self.k_main <= self.k_active && self.k_active <= self.n_experts) {
            return Err(Error::Config(alloc::format!(
                "{}: need k_main <= k_active <= n_experts, got {} / {} / {}",
                self.name, self.k_main, self.k_active, self.n_experts
            )));
        }
        Ok(())
    }

    fn wide(&self) -> [u128; 8] {
        [
            self.hidden_dim,
            self.ffn_dim,
            self.n_moe_layers,
            self.n_experts,
            self.k_active,
            self.k_main,
            self.non_moe_params,
            self.matrices_per_expert,
        ]
        .map(u128::from)
    }
}

fn narrow(what: &'static str, v: Option<u128>) -> Result<u64> {
    match v {
        Some(v) if v <= i64::MAX as u128 => Ok(v as u64),
        _ => Err(Error::Overflow(what)),
    }
}

/// `3·d·f·L·k`.
pub fn moe_active_full(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    let [d, f, l, _, k, _, _, m] = spec.wide();
    narrow(
        "moe_active_full",
        m.checked_mul(d)
            .and_then(|v| v.checked_mul(f))
            .and_then(|v| v.checked_mul(l))
            .and_then(|v| v.checked_mul(k)),
    )
}

/// `3·(d·f·k_m + 2d + f)·L`.
pub fn moe_active_ce(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    let [d, f, l, _, _, km, _, m] = spec.wide();
    let inner = d
        .checked_mul(f)
        .and_then(|v| v.checked_mul(km))
        .and_then(|v| v.checked_add(2 * d))
        .and_then(|v| v.checked_add(f));
    narrow("moe_active_ce", inner.and_then(|v| v.checked_mul(m)).and_then(|v| v.checked_mul(l)))
}

/// `3·(2d + f)·L`, the compressed-expert addend of [`moe_active_ce`].
pub fn ce_addend(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    let [d, f, l, _, _, _, _, m] = spec.wide();
    narrow("ce_addend", (2 * d).checked_add(f).and_then(|v| v.checked_mul(m * l)))
}

/// `3·d·f·k_m·L + n·d·L`.
pub fn moe_active_ce_strict(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    let [d, f, l, n, _, km, _, m] = spec.wide();
    let main = m.checked_mul(d).and_then(|v| v.checked_mul(f)).and_then(|v| v.checked_mul(km)).and_then(|v| v.checked_mul(l));
    let bank = n.checked_mul(d).and_then(|v| v.checked_mul(l));
    narrow("moe_active_ce_strict", main.zip(bank).and_then(|(a, b)| a.checked_add(b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Full,
    Ce,
    CeStrict,
}

/// Active MoE parameters per token under `mode`.
pub fn count_active(spec: &ArchSpec, mode: CountMode) -> Result<u64> {
    match mode {
        CountMode::Full => moe_active_full(spec),
        CountMode::Ce => moe_active_ce(spec),
        CountMode::CeStrict => moe_active_ce_strict(spec),
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamReport {
    pub name: String,
    pub moe_active_full: u64,
    pub moe_active_ce: u64,
    pub total_active_full: u64,
    pub total_active_ce: u64,
    /// `1 − total_active_ce / total_active_full`.
    pub saving_ratio: f64,
    pub moe_active_ce_strict: u64,
    pub total_active_ce_strict: u64,
    pub saving_ratio_strict: f64,
}

impl ParamReport {
    /// Saving as a percentage rounded to one decimal.
    pub fn saving_percent(&self) -> f64 {
        round1(self.saving_ratio * 100.0)
    }
}

/// Rounds to one decimal place, halves away from zero.
pub fn round1(x: f64) -> f64 {
    num_traits::Float::round(x * 10.0) / 10.0
}

pub fn param_report(spec: &ArchSpec) -> Result<ParamReport> {
    let full = moe_active_full(spec)?;
    let ce = moe_active_ce(spec)?;
    let strict = moe_active_ce_strict(spec)?;
    let add = |what, v: u64| narrow(what, u128::from(v).checked_add(u128::from(spec.non_moe_params)));
    let total_full = add("total_active_full", full)?;
    let total_ce = add("total_active_ce", ce)?;
    let total_strict = add("total_active_ce_strict", strict)?;
    let saving = |part: u64| 1.0 - part as f64 / total_full as f64;
    Ok(ParamReport {
        name: spec.name.clone(),
        moe_active_full: full,
        moe_active_ce: ce,
        total_active_full: total_full,
        total_active_ce: total_ce,
        saving_ratio: saving(total_ce),
        moe_active_ce_strict: strict,
        total_active_ce_strict: total_strict,
        saving_ratio_strict: saving(total_strict),
    })
}

/// Phi-MoE: d=4096, f=6400, 32 layers, 16 experts, top-2 with one main
/// expert, about 2.4B always-active parameters.
pub fn phi_moe() -> ArchSpec {
    ArchSpec {
        name: "phi-moe".into(),
        hidden_dim: 4096,
        ffn_dim: 6400,
        n_moe_layers: 32,
        n_experts: 16,
        k_active: 2,
        k_main: 1,
        non_moe_params: 2_400_000_000,
        matrices_per_expert: 3,
    }
}

/// OLMoE: d=2048, f=1024, 16 layers, 64 experts, top-8 with four main
/// experts, about 475M always-active parameters.
pub fn olmoe() -> ArchSpec {
    ArchSpec {
        name: "olmoe".into(),
        hidden_dim: 2048,
        ffn_dim: 1024,
        n_moe_layers: 16,
        n_experts: 64,
        k_active: 8,
        k_main: 4,
        non_moe_params: 475_000_000,
        matrices_per_expert: 3,
    }
}
