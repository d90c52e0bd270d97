//! Binary checkpoint: `RSCK`, `u32` format version, `u64` length of a JSON
//! blob (model config, tokenizer, budget), the blob, `u64` weight count, then
//! the weights as little-endian `f32` in parameter-layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Tokenizer};
use crate::belief::{BudgetFile, FocalSetBudget};
use crate::error::{Result, RslmError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tokenizer: Tokenizer,
    budget: Option<BudgetFile>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        budget: model.budget.as_ref().map(FocalSetBudget::to_file),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(24 + json.len() + 4 * model.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for &w in &model.params {
        buf.extend_from_slice(&(w as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| RslmError::format(path, msg);
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(at..at + n)
            .ok_or_else(|| RslmError::format(path, "truncated checkpoint"))?;
        at += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(RslmError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(json_len)?)
        .map_err(|e| RslmError::format(path, format!("bad header: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(
        count
            .checked_mul(4)
            .ok_or_else(|| bad("bad weight count"))?,
    )?;
    let weights: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if at != bytes.len() {
        return Err(bad("trailing bytes after weights"));
    }
    let budget = header.budget.map(FocalSetBudget::from_file).transpose()?;
    let mut model = Model::uninitialized(header.model, header.tokenizer, budget)?;
    if weights.len() != model.params.len() {
        return Err(RslmError::Checkpoint(format!(
            "expected {} weights, found {}",
            model.params.len(),
            weights.len()
        )));
    }
    model.params = weights;
    Ok(model)
}
