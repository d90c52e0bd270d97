//! Embeddings, toy data and budget construction.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rslm::budget::{
    analyze_budget, cut_to_budget, hierarchical_cluster_with, synth_blobs, ClusterTree,
    EmbeddingMatrix, Linkage, DEFAULT_MAX_TOKENS,
};
use rslm::toy;
use rslm::uncertainty::qa_to_jsonl;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::run::{write_file, Failure, Run};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Binary,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of tokens (rows).
    #[arg(long)]
    pub tokens: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Number of blobs; tokens are split into contiguous id ranges.
    #[arg(long)]
    pub blobs: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the blob label of every token, one per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

pub fn make_synth(a: &SynthArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, false);
    let seed = run.seed(None);
    let (e, labels) = synth_blobs(a.tokens, a.dim, a.blobs, seed)?;
    let bytes = match a.format {
        Format::Text => e.to_text().into_bytes(),
        Format::Binary => e.to_binary(),
    };
    write_file(&a.out, bytes)?;
    if let Some(path) = &a.labels {
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        write_file(path, text)?;
    }
    Ok(json!({ "tokens": a.tokens, "dim": a.dim, "blobs": a.blobs, "format": a.format }))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ToyArgs {
    /// Output directory for corpus.txt, qa.jsonl and qa_train.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn make_toy(a: &ToyArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, true);
    let corpus = toy::corpus();
    write_file(&a.out.join("corpus.txt"), corpus.join("\n") + "\n")?;
    let qa = toy::qa_records();
    write_file(&a.out.join("qa.jsonl"), qa_to_jsonl(&qa))?;
    let qa_train = toy::qa_training_set();
    write_file(&a.out.join("qa_train.jsonl"), qa_to_jsonl(&qa_train))?;
    Ok(json!({
        "corpus_sentences": corpus.len(),
        "qa_records": qa.len(),
        "qa_training_records": qa_train.len(),
    }))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct BudgetArgs {
    /// Embedding file, text or binary (detected from the content).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Number of clusters to cut the tree into.
    #[arg(long)]
    pub k: usize,
    /// Budget JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-cluster CSV (set id, cardinality, centroid distance).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Cluster-size histogram CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value = "ward")]
    pub linkage: Linkage,
    /// Scale embedding rows to unit length before clustering.
    #[arg(long)]
    pub normalize: bool,
    /// Refuse vocabularies larger than this.
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
}

/// Loads embeddings and enforces the vocabulary cap.
pub fn load_embeddings(path: &Path, max_tokens: usize) -> Result<EmbeddingMatrix> {
    let e = EmbeddingMatrix::load(path)
        .with_context(|| format!("loading embeddings {}", path.display()))?;
    if e.rows() > max_tokens {
        return Err(Failure::new(
            "too_many_tokens",
            format!(
                "{} tokens exceed --max-tokens {max_tokens}; exact clustering is quadratic in the vocabulary",
                e.rows()
            ),
        )
        .into());
    }
    Ok(e)
}

pub fn cluster(
    e: &EmbeddingMatrix,
    linkage: Linkage,
    normalize: bool,
    run: &Run,
) -> Result<ClusterTree> {
    Ok(if normalize {
        hierarchical_cluster_with(&e.normalized(), linkage, run.exec())?
    } else {
        hierarchical_cluster_with(e, linkage, run.exec())?
    })
}

pub fn budget(a: &BudgetArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, false);
    let e = load_embeddings(&a.embeddings, a.max_tokens)?;
    let tree = cluster(&e, a.linkage, a.normalize, run)?;
    let budget = cut_to_budget(&tree, a.k, e.rows())?;
    write_file(&a.out, budget.to_json())?;
    let report = analyze_budget(&budget, &e)?;
    if let Some(path) = &a.report {
        write_file(path, report.to_csv())?;
    }
    if let Some(path) = &a.histogram {
        write_file(path, report.histogram_csv())?;
    }
    print!("{}", report.to_table());
    Ok(json!({
        "tokens": e.rows(),
        "dim": e.cols(),
        "k": a.k,
        "linkage": a.linkage,
        "normalize": a.normalize,
        "max_tokens": a.max_tokens,
        "sets": budget.len(),
        "clusters": budget.num_clusters(),
    }))
}
