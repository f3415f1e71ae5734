//! Versioned JSON configuration files.
//!
//! Every file is a JSON object with a top-level `"version"` key next to the
//! fields of the configuration it holds. Unknown keys are rejected. The
//! schema for each kind is in `docs/config.schema.json`.

use std::path::Path;

use cemoe_core::model::ModelConfig;
use cemoe_core::task::SyntheticTask;
use cemoe_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::BenchConfig;
use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u64 = 1;

/// Configuration of the `train` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub train: TrainConfig,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
}

/// Configuration of the `bench` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    /// Geometry of the benchmarked model. `moe.k_active` and `moe.k_main`
    /// give the top-k / top-k_m comparison.
    pub model: ModelConfig,
    pub bench: BenchConfig,
    /// Values of `k_active` for the latency scaling fit.
    pub k_values: Vec<usize>,
    /// Seeds the model weights.
    pub seed: u64,
}

/// A parsed configuration together with the hash of its content.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub value: T,
    /// SHA-256 of the canonical (sorted-key, compact) JSON, hex encoded.
    pub hash: String,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Loaded<T>> {
    let invalid = |msg: String| CliError::Validation(format!("{origin}: {msg}"));
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
    let hash = content_hash(&value);
    let obj = value
        .as_object_mut()
        .ok_or_else(|| invalid("expected a JSON object".into()))?;
    match obj.remove("version") {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(CONFIG_VERSION) => {}
        Some(v) => return Err(invalid(format!("unsupported version {v}, expected {CONFIG_VERSION}"))),
        None => return Err(invalid("missing \"version\"".into())),
    }
    let value = serde_json::from_value(value).map_err(|e| invalid(e.to_string()))?;
    Ok(Loaded { value, hash })
}

/// Serializes `value` as a config file of the current version.
pub fn to_file_text<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("version".into(), CONFIG_VERSION.into());
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Hash of a JSON value independent of key order and whitespace.
pub fn content_hash(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key, so this is canonical.
    let bytes = serde_json::to_vec(value).expect("a parsed value serializes");
    hex::encode(Sha256::digest(bytes))
}
