use serde::{Deserialize, Serialize};

use super::Model;
use crate::belief::TokenId;
use crate::error::{Result, RslmError};
use crate::uncertainty::token_entropy_of;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredalRecord {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

/// One emitted token. `credal` and `widths` are `None` for softmax models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub step: usize,
    pub token_id: TokenId,
    pub token: String,
    pub distribution: Vec<f64>,
    pub entropy: f64,
    pub credal: Option<CredalRecord>,
    /// Credal width of every token, indexed by token id.
    pub widths: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxLen,
    Eos,
    /// The context window is full.
    Context,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: Vec<TokenId>,
    pub records: Vec<TokenRecord>,
    pub stop: StopReason,
}

impl GenerationTrace {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.records.iter().map(|r| r.token_id).collect()
    }

    /// One JSON object per emitted token.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    /// Records from a JSON-lines trace; the prompt is not stored there.
    pub fn records_from_jsonl(text: &str) -> Result<Vec<TokenRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Greedy decoding. Each step runs the model on the whole context, turns the
/// last head row into a distribution (random-set head: belief, mass, repair,
/// pignistic) and appends its argmax, lowest token id on ties. Stops after
/// `max_len` tokens, after emitting `<eos>`, or when the context is full.
pub fn generate(model: &Model, prompt: &[TokenId], max_len: usize) -> Result<GenerationTrace> {
    let context = model.config().context;
    if prompt.is_empty() {
        return Err(RslmError::InvalidArgument("empty prompt".into()));
    }
    if prompt.len() >= context {
        return Err(RslmError::ContextOverflow {
            len: prompt.len(),
            max: context - 1,
        });
    }
    super::check_ids(prompt, model.config().vocab_size)?;
    let eos = model.tokenizer().eos_id();
    let width = model.output_width();
    let mut ctx = prompt.to_vec();
    let mut records = Vec::new();
    let stop = loop {
        if records.len() == max_len {
            break StopReason::MaxLen;
        }
        if ctx.len() > context {
            break StopReason::Context;
        }
        let out = model.forward_one(&ctx)?;
        let pred = model.predict(&out[(ctx.len() - 1) * width..])?;
        let token = pred.token();
        let (credal, widths) = match (&pred.mass, model.budget()) {
            (Some(m), Some(b)) => {
                let intervals = b.credal_intervals(m)?;
                let chosen = intervals[token as usize];
                (
                    Some(CredalRecord {
                        lower: chosen.lower,
                        upper: chosen.upper,
                        width: chosen.width(),
                    }),
                    Some(intervals.iter().map(|c| c.width()).collect()),
                )
            }
            _ => (None, None),
        };
        records.push(TokenRecord {
            step: records.len(),
            token_id: token,
            token: model.tokenizer().token(token)?.to_string(),
            entropy: token_entropy_of(&pred.distribution),
            distribution: pred.distribution,
            credal,
            widths,
        });
        ctx.push(token);
        if token == eos {
            break StopReason::Eos;
        }
    };
    Ok(GenerationTrace {
        prompt: prompt.to_vec(),
        records,
        stop,
    })
}
