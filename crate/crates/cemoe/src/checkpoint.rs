//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         8 bytes  "CEMOECKP"
//! version       u32      currently 1
//! header_len    u32
//! header        header_len bytes of UTF-8 JSON:
//!               {"model": <ModelConfig>, "tensors": [{"name": .., "shape": [..]}, ..]}
//! data          for each tensor in header order, its elements as f64
//! ```
//!
//! Tensor names and shapes must match the layout of a model built from the
//! stored configuration, so a checkpoint can only be loaded into the
//! architecture it came from.

use std::io::{Read, Write};
use std::path::Path;

use cemoe_core::model::{ModelConfig, ModelParams};
use cemoe_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"CEMOECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(params: &ModelParams<f64>, out: &mut impl Write) -> Result<()> {
    let named = params.named_tensors();
    let header = Header {
        model: params.cfg,
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let len = u32::try_from(header.len()).map_err(|_| CliError::Runtime("checkpoint header too large".into()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * params.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &named {
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| CliError::Runtime(format!("writing checkpoint: {e}")))
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelParams<f64>> {
    let bad = |msg: &str| CliError::Validation(format!("checkpoint: {msg}"));
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::Runtime(format!("reading checkpoint: {e}")))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&e.to_string()))?;

    let mut params = ModelParams::<f64>::init(header.model, 0)?;
    let expected: Vec<TensorEntry> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor layout does not match the stored model configuration"));
    }
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() - header_end != 8 * total {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            8 * total,
            bytes.len() - header_end
        )));
    }
    let mut values = bytes[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (slot, entry) in params.tensors_mut().into_iter().zip(&expected) {
        let n = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        *slot = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(params)
}

pub fn save(params: &ModelParams<f64>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    crate::report::write_atomic(path, &buf)
}

pub fn load(path: &Path) -> Result<ModelParams<f64>> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(&mut f)
}
