use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadKind, Model, StepLoss, TrainingBatch};
use crate::belief::TokenId;
use crate::error::{Result, RslmError};
use crate::loss::LossConfig;
use crate::par::Execution;
use crate::uncertainty::token_entropy_of;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = RslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            _ => Err(RslmError::InvalidArgument(format!(
                "unknown optimizer {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum coefficient; Adam's first-moment decay.
    pub momentum: f64,
    /// Adam's second-moment decay.
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 0.01,
            momentum: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Seeds the order in which training windows are visited.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: StepLoss,
}

struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(cfg: OptimizerConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        if let Some(max) = self.cfg.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        let c = &self.cfg;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= c.learning_rate * g;
                }
            }
            OptimizerKind::Momentum => {
                for ((p, g), m) in params.iter_mut().zip(grad.iter()).zip(&mut self.m) {
                    *m = c.momentum * *m + g;
                    *p -= c.learning_rate * *m;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1t = 1.0 - c.momentum.powi(self.t);
                let b2t = 1.0 - c.beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = c.momentum * *m + (1.0 - c.momentum) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.learning_rate * (*m / b1t) / ((*v / b2t).sqrt() + c.epsilon);
                }
            }
        }
    }
}

/// Splits documents into training sequences of at most `context + 1` tokens
/// (inputs fit the context). Consecutive windows overlap by one token so every
/// transition is kept; single-token documents are dropped.
pub fn training_windows(docs: &[Vec<TokenId>], context: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for doc in docs {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + context + 1).min(doc.len());
            out.push(doc[start..end].to_vec());
            start += context;
        }
    }
    out
}

/// Teacher-forced training for `cfg.steps` steps. `on_step` sees each step's
/// log entry as it is produced. Fails with the step number if the loss stops
/// being finite.
pub fn train(
    model: &mut Model,
    docs: &[Vec<TokenId>],
    cfg: &TrainConfig,
    exec: Execution,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(RslmError::InvalidArgument(
            "batch_size must be positive".into(),
        ));
    }
    let windows = training_windows(docs, model.config().context);
    if windows.is_empty() {
        return Err(RslmError::InvalidArgument(
            "corpus has no sequence with two or more tokens".into(),
        ));
    }
    for w in &windows {
        super::check_ids(w, model.config().vocab_size)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = order.len();
    let batch_size = cfg.batch_size.min(windows.len());
    let mut opt = Optimizer::new(cfg.optimizer, model.params().len());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(batch_size);
        while picked.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(windows[order[cursor]].clone());
            cursor += 1;
        }
        let batch = TrainingBatch::new(picked, model.config().vocab_size)?;
        let (loss, mut grad) = model.loss_and_grad(&batch, &cfg.loss, exec)?;
        if !loss.total.is_finite() {
            return Err(RslmError::NonFiniteLoss { step });
        }
        let entry = StepLog { step, loss };
        on_step(&entry)?;
        log.push(entry);
        opt.step(model.params_mut(), &mut grad);
    }
    Ok(log)
}

/// Teacher-forced next-token statistics over every position of `docs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub positions: usize,
    /// Fraction of positions whose argmax prediction is the next token.
    pub accuracy: f64,
    /// Mean entropy (nats) of the predicted distribution.
    pub mean_entropy: f64,
    /// Mean credal width of the predicted token (random-set head only).
    pub mean_credal_width: Option<f64>,
}

pub fn evaluate(model: &Model, docs: &[Vec<TokenId>], exec: Execution) -> Result<Evaluation> {
    let windows = training_windows(docs, model.config().context);
    if windows.is_empty() {
        return Err(RslmError::InvalidArgument(
            "no sequence with two or more tokens to evaluate".into(),
        ));
    }
    let per_window = exec.map(&windows, |w| -> Result<(usize, f64, f64)> {
        let input = &w[..w.len() - 1];
        let out = model.forward_one(input)?;
        let width = model.output_width();
        let (mut hits, mut entropy, mut spread) = (0, 0.0, 0.0);
        for (j, &target) in w[1..].iter().enumerate() {
            let pred = model.predict(&out[j * width..(j + 1) * width])?;
            let token = pred.token();
            if token == target {
                hits += 1;
            }
            entropy += token_entropy_of(&pred.distribution);
            if let (Some(m), Some(b)) = (&pred.mass, model.budget()) {
                spread += b.credal_bounds(m, token)?.width();
            }
        }
        Ok((hits, entropy, spread))
    });
    let (mut hits, mut entropy, mut spread, mut positions) = (0, 0.0, 0.0, 0);
    for (w, r) in windows.iter().zip(per_window) {
        let (h, e, s) = r?;
        hits += h;
        entropy += e;
        spread += s;
        positions += w.len() - 1;
    }
    let n = positions as f64;
    Ok(Evaluation {
        positions,
        accuracy: hits as f64 / n,
        mean_entropy: entropy / n,
        mean_credal_width: (model.head() == HeadKind::RandomSet).then_some(spread / n),
    })
}
