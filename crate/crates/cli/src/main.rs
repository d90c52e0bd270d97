mod data;
mod probe;
mod run;
mod sweep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use run::{Failure, Globals, Run};

/// Random-set language model experiments: budgets, training, generation and
/// uncertainty probes.
#[derive(Parser, Debug)]
#[command(name = "rslm", version)]
struct Cli {
    /// Seed for every random choice in the run (RSLM_SEED takes precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for run.json; defaults to the directory of the main output.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Print progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Rerun the command recorded in a run.json.
    #[arg(long, conflicts_with = "seed")]
    replay: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write Gaussian-blob token embeddings.
    MakeSynthEmbeddings(data::SynthArgs),
    /// Write the built-in toy corpus and QA sets.
    MakeToyData(data::ToyArgs),
    /// Cluster embeddings into a focal-set budget.
    Budget(data::BudgetArgs),
    /// Train a model on a corpus and save a checkpoint.
    Train(train::TrainArgs),
    /// Greedy generation with a per-token uncertainty trace.
    Generate(train::GenerateArgs),
    /// Clean versus corrupted-context uncertainty on a QA set.
    Probe(probe::ProbeArgs),
    /// Train and evaluate over a grid of K and alpha = beta.
    Sweep(sweep::SweepArgs),
    /// CSV data for uncertainty plots from traces and probe reports.
    PlotData(probe::PlotArgs),
}

#[derive(Deserialize)]
struct Recorded {
    command: Command,
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(kind_of(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (command, seed) = match (cli.replay, cli.command) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            let rec: Recorded = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            (rec.command, Some(rec.seed))
        }
        (None, Some(command)) => (command, cli.seed),
        (Some(_), Some(_)) => {
            return Err(
                Failure::new("usage", "--replay cannot be combined with a subcommand").into(),
            )
        }
        (None, None) => return Err(Failure::new("usage", "no subcommand given").into()),
    };
    let globals = Globals::resolve(seed, cli.run_dir, cli.sequential, cli.verbose)?;
    let mut run = Run::new(&command, globals);
    let resolved = match &command {
        Command::MakeSynthEmbeddings(a) => data::make_synth(a, &mut run)?,
        Command::MakeToyData(a) => data::make_toy(a, &mut run)?,
        Command::Budget(a) => data::budget(a, &mut run)?,
        Command::Train(a) => train::train(a, &mut run)?,
        Command::Generate(a) => train::generate(a, &mut run)?,
        Command::Probe(a) => probe::probe(a, &mut run)?,
        Command::Sweep(a) => sweep::sweep(a, &mut run)?,
        Command::PlotData(a) => probe::plot_data(a, &mut run)?,
    };
    run.finish(resolved)
}

fn kind_of(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(r) = cause.downcast_ref::<rslm::RslmError>() {
            return r.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
    }
    "error"
}

fn report(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": message.trim_end(), "kind": kind });
    eprintln!("{body}");
}
