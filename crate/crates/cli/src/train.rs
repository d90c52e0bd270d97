//! Training and generation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rslm::belief::{FocalSetBudget, TokenId};
use rslm::loss::PenaltyGranularity;
use rslm::model::{
    evaluate, generate as greedy, load_checkpoint, save_checkpoint, train as fit, Evaluation,
    HeadKind, Model, ModelConfig, OptimizerKind, StepLog, Tokenizer, TrainConfig,
};
use rslm::uncertainty::{load_qa_jsonl, QaRecord};
use rslm::Execution;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::run::{read_lines, write_file, Failure, Run};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One document per non-blank line.
    #[default]
    Text,
    /// QA records as JSON lines; each document is "context question answer".
    Qa,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerChoice {
    #[default]
    Word,
    Byte,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenizer: TokenizerChoice,
    pub corpus_format: CorpusFormat,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Command-line overrides of the config file.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct Overrides {
    #[arg(long, value_enum)]
    pub corpus_format: Option<CorpusFormat>,
    #[arg(long, value_enum)]
    pub tokenizer: Option<TokenizerChoice>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Weight of the negative-mass penalty.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the mass-sum penalty.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Unit over which the mass penalties are averaged: position or item.
    #[arg(long)]
    pub penalty_granularity: Option<PenaltyGranularity>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, f: &mut ConfigFile) {
        let m = &mut f.model;
        let t = &mut f.train;
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(self.corpus_format => f.corpus_format);
        set!(self.tokenizer => f.tokenizer);
        set!(self.steps => t.steps);
        set!(self.batch_size => t.batch_size);
        set!(self.lr => t.optimizer.learning_rate);
        set!(self.optimizer => t.optimizer.kind);
        set!(self.alpha => t.loss.alpha);
        set!(self.beta => t.loss.beta);
        set!(self.penalty_granularity => t.loss.granularity);
        set!(self.dim => m.dim);
        set!(self.context => m.context);
        set!(self.layers => m.layers);
        set!(self.hidden => m.hidden);
    }
}

/// Tokenized training documents.
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub docs: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn load(path: &Path, format: CorpusFormat, tokenizer: TokenizerChoice) -> Result<Self> {
        let texts: Vec<String> = match format {
            CorpusFormat::Text => read_lines(path)?,
            CorpusFormat::Qa => load_qa_jsonl(path)
                .with_context(|| format!("loading QA corpus {}", path.display()))?
                .iter()
                .map(QaRecord::document)
                .collect(),
        };
        if texts.is_empty() {
            return Err(Failure::new(
                "empty_corpus",
                format!("{} has no documents", path.display()),
            )
            .into());
        }
        let tokenizer = match tokenizer {
            TokenizerChoice::Word => Tokenizer::word_level(&texts.join("\n"))?,
            TokenizerChoice::Byte => Tokenizer::byte_level(),
        };
        let docs = texts
            .iter()
            .map(|t| tokenizer.encode_document(t))
            .collect::<rslm::Result<_>>()?;
        Ok(Self { tokenizer, docs })
    }
}

pub struct Fitted {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub eval: Evaluation,
}

/// Trains, rounds the weights to the checkpoint precision and evaluates on
/// the training documents.
pub fn fit_and_evaluate(
    mut model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    corpus: &Corpus,
    budget: Option<FocalSetBudget>,
    exec: Execution,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Fitted> {
    model_cfg.vocab_size = corpus.tokenizer.vocab_size();
    let mut model = Model::new(model_cfg, corpus.tokenizer.clone(), budget)?;
    let mut sink_error = None;
    let log = fit(&mut model, &corpus.docs, train_cfg, exec, |s| {
        on_step(s).map_err(|e| {
            let msg = format!("{e:#}");
            sink_error = Some(e);
            rslm::RslmError::InvalidArgument(msg)
        })
    });
    if let Some(e) = sink_error {
        return Err(e);
    }
    let log = log?;
    model.round_to_f32();
    let eval = evaluate(&model, &corpus.docs, exec)?;
    Ok(Fitted { model, log, eval })
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Focal-set budget JSON; required for the random-set head.
    #[arg(long)]
    pub budget: Option<PathBuf>,
    /// Output head: rs or softmax.
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// JSON with optional "model", "train", "tokenizer", "corpus_format" and "seed".
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub overrides: Overrides,
}

pub fn train(a: &TrainArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, false);
    let mut cfg = ConfigFile::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    if let Some(h) = a.head {
        cfg.model.head = h;
    }
    let seed = run.seed(cfg.seed);
    cfg.model.seed = seed;
    cfg.train.seed = seed;

    let corpus = Corpus::load(&a.corpus, cfg.corpus_format, cfg.tokenizer)?;
    let budget = match (&a.budget, cfg.model.head) {
        (Some(p), HeadKind::RandomSet) => Some(
            FocalSetBudget::load(p).with_context(|| format!("loading budget {}", p.display()))?,
        ),
        (None, HeadKind::RandomSet) => {
            return Err(Failure::new("usage", "the rs head needs --budget").into())
        }
        (Some(_), HeadKind::Softmax) => {
            return Err(Failure::new("usage", "the softmax head takes no --budget").into())
        }
        (None, HeadKind::Softmax) => None,
    };
    let budget_sets = budget.as_ref().map(FocalSetBudget::len);

    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", a.out.display())));
    if let Some(p) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let verbose = run.verbose();
    let every = (cfg.train.steps / 10).max(1);
    let fitted = fit_and_evaluate(
        cfg.model.clone(),
        &cfg.train,
        &corpus,
        budget,
        run.exec(),
        |s| {
            let line = serde_json::to_string(s)?;
            writeln!(log, "{line}")?;
            if verbose > 1 || (verbose > 0 && (s.step % every == 0 || s.step == 1)) {
                eprintln!("{line}");
            }
            Ok(())
        },
    )?;
    log.flush()?;
    save_checkpoint(&fitted.model, &a.out)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;

    let first = fitted.log.first().map(|s| s.loss.total);
    let last = fitted.log.last().map(|s| s.loss.total);
    println!(
        "{}",
        json!({
            "steps": fitted.log.len(),
            "initial_loss": first,
            "final_loss": last,
            "accuracy": fitted.eval.accuracy,
            "mean_entropy": fitted.eval.mean_entropy,
            "mean_credal_width": fitted.eval.mean_credal_width,
        })
    );
    cfg.model.vocab_size = corpus.tokenizer.vocab_size();
    Ok(json!({
        "config": cfg,
        "documents": corpus.docs.len(),
        "budget_sets": budget_sets,
        "log": log_path,
    }))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Maximum number of generated tokens.
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    /// Per-token trace output (JSON lines).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn generate(a: &GenerateArgs, run: &mut Run) -> Result<Value> {
    if let Some(t) = &a.trace {
        run.output(t, false);
    }
    let model = load_checkpoint(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let tok = model.tokenizer();
    let prompt = tok.encode(&a.prompt)?;
    let trace = greedy(&model, &prompt, a.max_len)?;
    if let Some(t) = &a.trace {
        write_file(t, trace.to_jsonl())?;
    }
    println!("{}", tok.decode(&trace.tokens())?);
    if run.verbose() > 0 {
        eprintln!("stop: {}", serde_json::to_string(&trace.stop)?);
    }
    Ok(json!({
        "head": model.head(),
        "prompt_tokens": prompt.len(),
        "max_len": a.max_len,
    }))
}
