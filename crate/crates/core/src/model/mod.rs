//! Small causal transformer language model with either a softmax head over
//! the `T` tokens or a random-set head over the `|O|` focal sets of a budget.
//!
//! Everything is computed in `f64`; checkpoints store `f32`. Items in a batch
//! are processed independently (optionally in parallel) and their parameter
//! gradients are summed in item order, so results do not depend on the
//! execution mode.

mod checkpoint;
mod generate;
mod layout;
mod net;
mod tokenizer;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generate::{generate, CredalRecord, GenerationTrace, StopReason, TokenRecord};
pub use tokenizer::{Tokenizer, TokenizerKind, EOS};
pub use train::{
    evaluate, train, training_windows, Evaluation, OptimizerConfig, OptimizerKind, StepLog,
    TrainConfig,
};

use crate::belief::{argmax, FocalSetBudget, MassFunction, TokenId};
use crate::error::{Result, RslmError};
use crate::loss::{loss_and_gradient, BeliefBatch, LossConfig};
use crate::par::Execution;
use layout::Layout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "softmax")]
    Softmax,
    #[default]
    #[serde(rename = "rs", alias = "random_set")]
    RandomSet,
}

impl std::str::FromStr for HeadKind {
    type Err = RslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "rs" | "random_set" => Ok(Self::RandomSet),
            _ => Err(RslmError::InvalidArgument(format!("unknown head {s:?}"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::RandomSet => "rs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding width `D`.
    pub dim: usize,
    /// Maximum input length `C`.
    pub context: usize,
    pub layers: usize,
    /// Feed-forward hidden width.
    pub hidden: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            dim: 32,
            context: 64,
            layers: 1,
            hidden: 64,
            head: HeadKind::RandomSet,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(RslmError::InvalidArgument(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("context", self.context),
            ("layers", self.layers),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(RslmError::InvalidArgument(format!(
                    "{name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Head outputs laid out `[batch][position][width]`: belief values for the
/// random-set head, probabilities for the softmax head. Positions past an
/// item's length are zero and masked.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub head: HeadKind,
    pub batch: usize,
    pub positions: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl HeadOutput {
    pub fn at(&self, item: usize, position: usize) -> &[f64] {
        let start = (item * self.positions + position) * self.width;
        &self.values[start..start + self.width]
    }
}

/// Sequences for teacher forcing: the input is every token but the last and
/// the target at position `j` is the token at `j + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    sequences: Vec<Vec<TokenId>>,
}

impl TrainingBatch {
    pub fn new(sequences: Vec<Vec<TokenId>>, vocab_size: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(RslmError::InvalidArgument("empty batch".into()));
        }
        for s in &sequences {
            if s.len() < 2 {
                return Err(RslmError::InvalidArgument(
                    "training sequences need at least two tokens".into(),
                ));
            }
            check_ids(s, vocab_size)?;
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of predicted positions after padding.
    pub fn positions(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.len() - 1)
            .max()
            .unwrap_or(0)
    }

    pub fn input(&self, item: usize) -> &[TokenId] {
        let s = &self.sequences[item];
        &s[..s.len() - 1]
    }

    pub fn target(&self, item: usize) -> &[TokenId] {
        &self.sequences[item][1..]
    }

    pub fn inputs(&self) -> Vec<Vec<TokenId>> {
        (0..self.len()).map(|i| self.input(i).to_vec()).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        let p = self.positions();
        self.sequences
            .iter()
            .flat_map(|s| (0..p).map(move |j| j + 1 < s.len()))
            .collect()
    }
}

fn check_ids(ids: &[TokenId], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&token) => Err(RslmError::TokenOutOfRange {
            token: token as usize,
            vocab_size,
        }),
        None => Ok(()),
    }
}

/// Loss of one training step. Random-set heads fill `bce`, `m_r`, `m_s`;
/// softmax heads fill `ce`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    pub total: f64,
}

/// A next-token prediction read off one head row.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Pignistic distribution (random-set head) or softmax probabilities.
    pub distribution: Vec<f64>,
    /// Repaired mass, random-set head only.
    pub mass: Option<MassFunction>,
}

impl Prediction {
    pub fn token(&self) -> TokenId {
        argmax(&self.distribution) as TokenId
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    tokenizer: Tokenizer,
    budget: Option<FocalSetBudget>,
    layout: Layout,
    params: Vec<f64>,
}

impl Model {
    /// Freshly initialised model. The random-set head needs a budget over the
    /// tokenizer's vocabulary; the softmax head must not have one. The output
    /// layer starts at zero.
    pub fn new(
        config: ModelConfig,
        tokenizer: Tokenizer,
        budget: Option<FocalSetBudget>,
    ) -> Result<Self> {
        let mut model = Self::uninitialized(config, tokenizer, budget)?;
        model.init_params();
        Ok(model)
    }

    fn uninitialized(
        config: ModelConfig,
        tokenizer: Tokenizer,
        budget: Option<FocalSetBudget>,
    ) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(RslmError::DimensionMismatch {
                expected: tokenizer.vocab_size(),
                actual: config.vocab_size,
            });
        }
        let out_width = match (config.head, &budget) {
            (HeadKind::RandomSet, Some(b)) => {
                if b.vocab_size() != config.vocab_size {
                    return Err(RslmError::InvalidBudget(format!(
                        "budget covers {} tokens but the vocabulary has {}",
                        b.vocab_size(),
                        config.vocab_size
                    )));
                }
                b.len()
            }
            (HeadKind::RandomSet, None) => {
                return Err(RslmError::InvalidArgument(
                    "the random-set head requires a budget".into(),
                ))
            }
            (HeadKind::Softmax, None) => config.vocab_size,
            (HeadKind::Softmax, Some(_)) => {
                return Err(RslmError::InvalidArgument(
                    "the softmax head does not take a budget".into(),
                ))
            }
        };
        let layout = Layout::new(
            config.vocab_size,
            config.dim,
            config.context,
            config.layers,
            config.hidden,
            out_width,
        );
        let params = vec![0.0; layout.total];
        Ok(Self {
            config,
            tokenizer,
            budget,
            layout,
            params,
        })
    }

    fn init_params(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let (d, h) = (self.config.dim, self.config.hidden);
        let lay = &self.layout;
        let p = &mut self.params;
        let mut fill = |start: usize, len: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in &mut p[start..start + len] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(lay.tok_emb, self.config.vocab_size * d, 1.0);
        fill(lay.pos_emb, self.config.context * d, 1.0);
        let residual = 1.0 / (2.0 * self.config.layers as f64).sqrt();
        for l in &lay.layers {
            let s = 1.0 / (d as f64).sqrt();
            fill(l.wq, d * d, s);
            fill(l.wk, d * d, s);
            fill(l.wv, d * d, s);
            fill(l.wo, d * d, s * residual);
            fill(l.w1, d * h, s);
            fill(l.w2, h * d, residual / (h as f64).sqrt());
        }
        for l in &lay.layers {
            p[l.ln1_g..l.ln1_g + d].fill(1.0);
            p[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        p[lay.lnf_g..lay.lnf_g + d].fill(1.0);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn budget(&self) -> Option<&FocalSetBudget> {
        self.budget.as_ref()
    }

    /// `|O|` for the random-set head, `T` for softmax.
    pub fn output_width(&self) -> usize {
        self.layout.out_width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rounds every weight to `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.params {
            *v = *v as f32 as f64;
        }
    }

    fn check_input(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(RslmError::InvalidArgument("empty input sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(RslmError::ContextOverflow {
                len: tokens.len(),
                max: self.config.context,
            });
        }
        check_ids(tokens, self.config.vocab_size)
    }

    fn activate(&self, logits: &mut [f64]) {
        match self.config.head {
            HeadKind::RandomSet => logits.iter_mut().for_each(|v| *v = sigmoid(*v)),
            HeadKind::Softmax => logits
                .chunks_mut(self.layout.out_width)
                .for_each(softmax_in_place),
        }
    }

    /// Head outputs for one sequence, `len x width`.
    pub fn forward_one(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_input(tokens)?;
        let (mut out, _) = net::forward(&self.config, &self.layout, &self.params, tokens);
        self.activate(&mut out);
        Ok(out)
    }

    /// Head outputs for a batch of input sequences, padded to the longest.
    pub fn forward(&self, inputs: &[Vec<TokenId>], exec: Execution) -> Result<HeadOutput> {
        for s in inputs {
            self.check_input(s)?;
        }
        let positions = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let width = self.layout.out_width;
        let rows = exec.map(inputs, |s| self.forward_one(s).expect("checked input"));
        let mut values = vec![0.0; inputs.len() * positions * width];
        let mut mask = vec![false; inputs.len() * positions];
        for (i, r) in rows.iter().enumerate() {
            let start = i * positions * width;
            values[start..start + r.len()].copy_from_slice(r);
            mask[i * positions..i * positions + inputs[i].len()].fill(true);
        }
        Ok(HeadOutput {
            head: self.config.head,
            batch: inputs.len(),
            positions,
            width,
            values,
            mask,
        })
    }

    /// Next-token prediction from one head row: belief to mass, repair,
    /// pignistic for the random-set head; the probabilities themselves for
    /// softmax.
    pub fn predict(&self, row: &[f64]) -> Result<Prediction> {
        match &self.budget {
            Some(b) if self.config.head == HeadKind::RandomSet => {
                let mut raw = vec![0.0; b.len()];
                b.belief_to_mass_into(row, &mut raw);
                let mass = b.repair_mass(&MassFunction::new(raw))?;
                let distribution = b.pignistic(&mass)?.into_inner();
                Ok(Prediction {
                    distribution,
                    mass: Some(mass),
                })
            }
            _ => Ok(Prediction {
                distribution: row.to_vec(),
                mass: None,
            }),
        }
    }

    pub fn loss(
        &self,
        batch: &TrainingBatch,
        cfg: &LossConfig,
        exec: Execution,
    ) -> Result<StepLoss> {
        Ok(self.loss_and_grad(batch, cfg, exec)?.0)
    }

    /// Teacher-forced loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        batch: &TrainingBatch,
        cfg: &LossConfig,
        exec: Execution,
    ) -> Result<(StepLoss, Vec<f64>)> {
        check_ids(&batch.sequences.concat(), self.config.vocab_size)?;
        for i in 0..batch.len() {
            self.check_input(batch.input(i))?;
        }
        let width = self.layout.out_width;
        let positions = batch.positions();
        let items: Vec<usize> = (0..batch.len()).collect();
        let passes = exec.map(&items, |&i| {
            net::forward(&self.config, &self.layout, &self.params, batch.input(i))
        });

        let (loss, dlogits) = match self.config.head {
            HeadKind::RandomSet => self.rs_head_grad(batch, &passes, cfg, exec)?,
            HeadKind::Softmax => softmax_head_grad(batch, &passes, width),
        };

        let grads = exec.map(&items, |&i| {
            let mut g = vec![0.0; self.layout.total];
            let n = batch.input(i).len();
            let start = i * positions * width;
            net::backward(
                &self.config,
                &self.layout,
                &self.params,
                batch.input(i),
                &passes[i].1,
                &dlogits[start..start + n * width],
                &mut g,
            );
            g
        });
        let mut grad = vec![0.0; self.layout.total];
        for g in &grads {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss, grad))
    }

    fn rs_head_grad(
        &self,
        batch: &TrainingBatch,
        passes: &[(Vec<f64>, net::Cache)],
        cfg: &LossConfig,
        exec: Execution,
    ) -> Result<(StepLoss, Vec<f64>)> {
        let budget = self.budget.as_ref().expect("random-set head has a budget");
        let width = budget.len();
        let positions = batch.positions();
        let mut pred = vec![0.0; batch.len() * positions * width];
        let mut target = vec![0.0; pred.len()];
        for (i, (logits, _)) in passes.iter().enumerate() {
            for (j, &t) in batch.target(i).iter().enumerate() {
                let start = (i * positions + j) * width;
                for (p, &z) in pred[start..start + width]
                    .iter_mut()
                    .zip(&logits[j * width..(j + 1) * width])
                {
                    *p = sigmoid(z);
                }
                budget.ground_truth_into(t, &mut target[start..start + width]);
            }
        }
        let mask = batch.mask();
        let pred = BeliefBatch::with_mask(batch.len(), positions, width, pred, mask.clone())?;
        let target = BeliefBatch::with_mask(batch.len(), positions, width, target, mask)?;
        let (b, mut grad) = loss_and_gradient(&pred, &target, budget, cfg, exec)?;
        for (g, &s) in grad.iter_mut().zip(&pred.values) {
            *g *= s * (1.0 - s);
        }
        let loss = StepLoss {
            bce: Some(b.bce),
            m_r: Some(b.mass_nonneg),
            m_s: Some(b.mass_sum),
            ce: None,
            total: b.total,
        };
        Ok((loss, grad))
    }
}

fn softmax_head_grad(
    batch: &TrainingBatch,
    passes: &[(Vec<f64>, net::Cache)],
    width: usize,
) -> (StepLoss, Vec<f64>) {
    let positions = batch.positions();
    let active = batch.mask().iter().filter(|&&m| m).count() as f64;
    let mut grad = vec![0.0; batch.len() * positions * width];
    let mut nll = 0.0;
    for (i, (logits, _)) in passes.iter().enumerate() {
        for (j, &t) in batch.target(i).iter().enumerate() {
            let row = &logits[j * width..(j + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            nll += z.ln() + max - row[t as usize];
            let start = (i * positions + j) * width;
            for (k, g) in grad[start..start + width].iter_mut().enumerate() {
                let p = (row[k] - max).exp() / z;
                *g = (p - if k == t as usize { 1.0 } else { 0.0 }) / active;
            }
        }
    }
    let ce = nll / active;
    (
        StepLoss {
            bce: None,
            m_r: None,
            m_s: None,
            ce: Some(ce),
            total: ce,
        },
        grad,
    )
}
