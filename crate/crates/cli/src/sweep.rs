//! Ablation sweeps over the budget size and the penalty weights.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use rslm::belief::FocalSetBudget;
use rslm::budget::{cut_to_budget, Linkage, DEFAULT_MAX_TOKENS};
use rslm::model::HeadKind;
use rslm::Execution;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{cluster, load_embeddings};
use crate::run::{write_file, Failure, Run};
use crate::train::{fit_and_evaluate, ConfigFile, Corpus, Overrides};

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Token embeddings used to build one budget per K.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Comma-separated budget sizes.
    #[arg(long, default_value = "10")]
    pub ks: String,
    /// Comma-separated penalty weights; each cell uses alpha = beta.
    #[arg(long, default_value = "0.01")]
    pub alphas: String,
    /// Same format as for `train`; the grid overrides alpha and beta.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for sweep.csv and the budgets.
    #[arg(long)]
    pub out: PathBuf,
    /// Run cells concurrently (each cell then trains on one thread).
    #[arg(long)]
    pub parallel: bool,
    #[arg(long, default_value = "ward")]
    pub linkage: Linkage,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub overrides: Overrides,
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse().map_err(|_| {
                Failure::new("invalid_argument", format!("{flag}: cannot parse {x:?}")).into()
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
struct Cell {
    k: usize,
    alpha: f64,
}

#[derive(Debug)]
struct Outcome {
    sets: usize,
    non_singleton: usize,
    final_loss: f64,
    accuracy: f64,
    mean_entropy: f64,
    mean_credal_width: f64,
}

pub fn sweep(a: &SweepArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, true);
    let ks: Vec<usize> = parse_list(&a.ks, "--ks")?;
    let alphas: Vec<f64> = parse_list(&a.alphas, "--alphas")?;
    if ks.is_empty() || alphas.is_empty() {
        return Err(Failure::new("invalid_argument", "empty sweep grid").into());
    }
    if let Some(x) = alphas.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Failure::new(
            "invalid_argument",
            format!("--alphas: {x} is not a non-negative weight"),
        )
        .into());
    }

    let mut cfg = ConfigFile::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    cfg.model.head = HeadKind::RandomSet;
    let seed = run.seed(cfg.seed);
    cfg.model.seed = seed;
    cfg.train.seed = seed;

    let corpus = Corpus::load(&a.corpus, cfg.corpus_format, cfg.tokenizer)?;
    let e = load_embeddings(&a.embeddings, a.max_tokens)?;
    let vocab = corpus.tokenizer.vocab_size();
    if e.rows() != vocab {
        return Err(Failure::new(
            "dimension_mismatch",
            format!(
                "embeddings have {} rows but the corpus vocabulary has {vocab} tokens",
                e.rows()
            ),
        )
        .into());
    }

    // One clustering tree serves every K; a K that cannot be cut fails its cells only.
    let tree = cluster(&e, a.linkage, a.normalize, run)?;
    let budgets: Vec<Result<FocalSetBudget, String>> = ks
        .iter()
        .map(|&k| cut_to_budget(&tree, k, vocab).map_err(|err| err.to_string()))
        .collect();
    for (k, b) in ks.iter().zip(&budgets) {
        if let Ok(b) = b {
            write_file(
                &a.out.join("budgets").join(format!("budget_k{k}.json")),
                b.to_json(),
            )?;
        }
    }

    let cells: Vec<(Cell, usize)> = ks
        .iter()
        .enumerate()
        .flat_map(|(i, &k)| alphas.iter().map(move |&alpha| (Cell { k, alpha }, i)))
        .collect();
    let (outer, inner) = if a.parallel {
        (Execution::Parallel, Execution::Sequential)
    } else {
        (Execution::Sequential, run.exec())
    };
    let verbose = run.verbose();
    let outcomes = outer.map(&cells, |(cell, bi)| -> Result<Outcome, String> {
        let budget = budgets[*bi].clone()?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.loss.alpha = cell.alpha;
        train_cfg.loss.beta = cell.alpha;
        let (sets, non_singleton) = (budget.len(), budget.num_clusters());
        let fitted = fit_and_evaluate(
            cfg.model.clone(),
            &train_cfg,
            &corpus,
            Some(budget),
            inner,
            |_| Ok(()),
        )
        .map_err(|err| format!("{err:#}"))?;
        let final_loss = fitted
            .log
            .last()
            .map(|s| s.loss.total)
            .ok_or_else(|| "no training steps".to_string())?;
        if verbose > 0 {
            eprintln!(
                "k={} alpha={} loss={final_loss} accuracy={}",
                cell.k, cell.alpha, fitted.eval.accuracy
            );
        }
        Ok(Outcome {
            sets,
            non_singleton,
            final_loss,
            accuracy: fitted.eval.accuracy,
            mean_entropy: fitted.eval.mean_entropy,
            mean_credal_width: fitted.eval.mean_credal_width.unwrap_or(f64::NAN),
        })
    });

    let mut csv = String::from(
        "cell,k,alpha,beta,sets,non_singleton,status,final_loss,accuracy,mean_entropy,mean_credal_width,error\n",
    );
    let mut failed = 0;
    for (i, ((cell, _), out)) in cells.iter().zip(&outcomes).enumerate() {
        match out {
            Ok(o) => {
                let _ = writeln!(
                    csv,
                    "{i},{},{},{},{},{},ok,{},{},{},{},",
                    cell.k,
                    cell.alpha,
                    cell.alpha,
                    o.sets,
                    o.non_singleton,
                    o.final_loss,
                    o.accuracy,
                    o.mean_entropy,
                    o.mean_credal_width
                );
            }
            Err(msg) => {
                failed += 1;
                let _ = writeln!(
                    csv,
                    "{i},{},{},{},,,failed,,,,,{}",
                    cell.k,
                    cell.alpha,
                    cell.alpha,
                    rslm::uncertainty::csv_field(msg)
                );
            }
        }
    }
    write_file(&a.out.join("sweep.csv"), &csv)?;
    print!("{}", table(&cells, &outcomes));
    if failed > 0 {
        run.fail(Failure::new(
            "sweep_failed",
            format!(
                "{failed} of {} sweep cells failed; see sweep.csv",
                cells.len()
            ),
        ));
    }
    cfg.model.vocab_size = vocab;
    Ok(json!({
        "config": cfg,
        "ks": ks,
        "alphas": alphas,
        "cells": cells.iter().map(|(c, _)| c).collect::<Vec<_>>(),
        "linkage": a.linkage,
        "normalize": a.normalize,
        "parallel": a.parallel,
    }))
}

fn table(cells: &[(Cell, usize)], outcomes: &[Result<Outcome, String>]) -> String {
    let mut s = format!(
        "{:>4} {:>8} {:>6} {:>11} {:>9} {:>9} {:>9}\n",
        "K", "alpha", "sets", "final loss", "accuracy", "entropy", "width"
    );
    for ((cell, _), out) in cells.iter().zip(outcomes) {
        match out {
            Ok(o) => {
                let _ = writeln!(
                    s,
                    "{:>4} {:>8} {:>6} {:>11.5} {:>9.4} {:>9.4} {:>9.4}",
                    cell.k,
                    cell.alpha,
                    o.sets,
                    o.final_loss,
                    o.accuracy,
                    o.mean_entropy,
                    o.mean_credal_width
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{:>4} {:>8} failed: {e}", cell.k, cell.alpha);
            }
        }
    }
    s
}
