//! Uncertainty probes and plot data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rslm::model::{load_checkpoint, GenerationTrace};
use rslm::uncertainty::{
    csv_field, load_qa_jsonl, run_probe, Aggregation, Condition, Corruption, ProbeConfig,
    ProbeReport,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::run::{write_file, Failure, Run};

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// QA records as JSON lines with "context", "question" and "answer".
    #[arg(long)]
    pub data: PathBuf,
    /// none, swap_question or swap_choices.
    #[arg(long, default_value = "swap_question")]
    pub corrupt: Corruption,
    /// Output directory for rows.csv, summary.json and report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Tokens generated per answer.
    #[arg(long, default_value_t = 4)]
    pub max_len: usize,
    /// How per-token values combine per answer: mean or max.
    #[arg(long, default_value = "mean")]
    pub aggregation: Aggregation,
    /// Report entropy in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
}

pub fn probe(a: &ProbeArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, true);
    let seed = run.seed(None);
    let model = load_checkpoint(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let records =
        load_qa_jsonl(&a.data).with_context(|| format!("loading QA data {}", a.data.display()))?;
    let cfg = ProbeConfig {
        corruption: a.corrupt,
        seed,
        max_len: a.max_len,
        aggregation: a.aggregation,
    };
    let mut report = run_probe(&model, &records, &cfg, run.exec())?;
    if a.bits {
        report = report.in_bits();
    }
    write_file(&a.out.join("rows.csv"), report.to_csv())?;
    let summary = json!({
        "config": report.config,
        "entropy_unit": report.entropy_unit,
        "summary": report.summary,
    });
    write_file(
        &a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    write_file(
        &a.out.join("report.json"),
        serde_json::to_string(&report)? + "\n",
    )?;
    print!("{}", report.to_table());
    Ok(json!({
        "probe": cfg,
        "records": records.len(),
        "head": model.head(),
        "entropy_unit": report.entropy_unit,
    }))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PlotArgs {
    /// Generation trace (JSON lines); repeat for several traces.
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// Probe output directory or its report.json.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins per metric.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

pub fn plot_data(a: &PlotArgs, run: &mut Run) -> Result<Value> {
    run.output(&a.out, true);
    if a.trace.is_empty() && a.probe.is_none() {
        return Err(Failure::new("usage", "plot-data needs --trace or --probe").into());
    }
    if a.bins == 0 {
        return Err(Failure::new("usage", "--bins must be positive").into());
    }
    let mut written = Vec::new();
    if !a.trace.is_empty() {
        let mut csv = String::from("trace,step,token_id,token,entropy,credal_width\n");
        for (i, path) in a.trace.iter().enumerate() {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let records = GenerationTrace::records_from_jsonl(&text)
                .with_context(|| format!("parsing trace {}", path.display()))?;
            for r in records {
                let _ = writeln!(
                    csv,
                    "{i},{},{},{},{},{}",
                    r.step,
                    r.token_id,
                    csv_field(&r.token),
                    r.entropy,
                    opt(r.credal.map(|c| c.width))
                );
            }
        }
        write_file(&a.out.join("tokens.csv"), csv)?;
        written.push("tokens.csv");
    }
    if let Some(p) = &a.probe {
        let report = load_report(p)?;
        let mut csv = String::from("condition,record,entropy,credal_width,correct\n");
        for r in &report.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.condition,
                r.record,
                r.entropy,
                opt(r.credal_width),
                u8::from(r.correct)
            );
        }
        write_file(&a.out.join("scatter.csv"), csv)?;
        written.push("scatter.csv");

        // Shared ranges so the per-condition histograms line up.
        let top = report.rows.iter().map(|r| r.entropy).fold(0.0, f64::max);
        let entropy_range = if top > 0.0 { top } else { 1.0 };
        for (cond, name) in [
            (Condition::Clean, "hist_clean.csv"),
            (Condition::Corrupted, "hist_corrupted.csv"),
        ] {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.condition == cond).collect();
            if rows.is_empty() {
                continue;
            }
            let mut csv = String::from("metric,bin,lower,upper,count\n");
            let entropies: Vec<f64> = rows.iter().map(|r| r.entropy).collect();
            histogram(&mut csv, "entropy", &entropies, entropy_range, a.bins);
            let widths: Vec<f64> = rows.iter().filter_map(|r| r.credal_width).collect();
            if !widths.is_empty() {
                histogram(&mut csv, "credal_width", &widths, 1.0, a.bins);
            }
            write_file(&a.out.join(name), csv)?;
            written.push(name);
        }
    }
    Ok(json!({
        "traces": a.trace,
        "probe": a.probe,
        "bins": a.bins,
        "files": written,
    }))
}

fn load_report(path: &Path) -> Result<ProbeReport> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)
        .with_context(|| format!("reading probe report {}", file.display()))?;
    let report: ProbeReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing probe report {}", file.display()))?;
    Ok(report)
}

/// Equal-width bins over `[0, top]`; the last bin is closed.
fn histogram(csv: &mut String, metric: &str, xs: &[f64], top: f64, bins: usize) {
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let b = ((x / top) * bins as f64).floor().max(0.0) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let lo = top * b as f64 / bins as f64;
        let hi = top * (b + 1) as f64 / bins as f64;
        let _ = writeln!(csv, "{metric},{b},{lo},{hi},{c}");
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}
