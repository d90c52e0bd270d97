//! Run bookkeeping: seed resolution, execution mode and `run.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rslm::Execution;
use serde::Serialize;
use serde_json::Value;

use crate::Command;

pub const SEED_ENV: &str = "RSLM_SEED";

/// A CLI-level failure with its own error kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Env,
    Flag,
    Config,
    Default,
}

pub struct Globals {
    env_seed: Option<u64>,
    flag_seed: Option<u64>,
    run_dir: Option<PathBuf>,
    pub exec: Execution,
    pub verbose: u8,
}

impl Globals {
    pub fn resolve(
        flag_seed: Option<u64>,
        run_dir: Option<PathBuf>,
        sequential: bool,
        verbose: u8,
    ) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                Failure::new("invalid_argument", format!("{SEED_ENV}={v:?} is not a u64"))
            })?),
            Err(_) => None,
        };
        Ok(Self {
            env_seed,
            flag_seed,
            run_dir,
            exec: if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            verbose,
        })
    }
}

/// One invocation. Commands resolve their seed through [`Run::seed`] and name
/// their main output with [`Run::output`]; [`Run::finish`] writes `run.json`.
pub struct Run {
    command: Value,
    globals: Globals,
    seed: Option<(u64, SeedSource)>,
    dir: Option<PathBuf>,
    failure: Option<Failure>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a Value,
    seed: u64,
    seed_source: SeedSource,
    execution: &'static str,
    resolved: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a str>,
}

impl Run {
    pub fn new(command: &Command, globals: Globals) -> Self {
        Self {
            command: serde_json::to_value(command).expect("commands serialize"),
            globals,
            seed: None,
            dir: None,
            failure: None,
        }
    }

    pub fn exec(&self) -> Execution {
        self.globals.exec
    }

    pub fn verbose(&self) -> u8 {
        self.globals.verbose
    }

    /// The run seed: `RSLM_SEED`, then `--seed`, then `config`, then 0.
    pub fn seed(&mut self, config: Option<u64>) -> u64 {
        let g = &self.globals;
        let (seed, source) = if let Some(s) = g.env_seed {
            (s, SeedSource::Env)
        } else if let Some(s) = g.flag_seed {
            (s, SeedSource::Flag)
        } else if let Some(s) = config {
            (s, SeedSource::Config)
        } else {
            (0, SeedSource::Default)
        };
        self.seed = Some((seed, source));
        seed
    }

    /// Registers the main output: a directory, or a file whose parent is used.
    pub fn output(&mut self, path: &Path, is_dir: bool) {
        let dir = if is_dir {
            path.to_path_buf()
        } else {
            match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            }
        };
        self.dir.get_or_insert(dir);
    }

    /// Marks the run as incomplete; `run.json` is still written.
    pub fn fail(&mut self, failure: Failure) {
        self.failure = Some(failure);
    }

    pub fn finish(mut self, resolved: Value) -> Result<()> {
        if self.seed.is_none() {
            self.seed(None);
        }
        let (seed, seed_source) = self.seed.expect("seed resolved");
        let dir = self
            .globals
            .run_dir
            .clone()
            .or(self.dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        let record = RunRecord {
            tool: "rslm",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            seed,
            seed_source,
            execution: if self.globals.exec.is_parallel() {
                "parallel"
            } else {
                "sequential"
            },
            resolved,
            failure: self.failure.as_ref().map(|f| f.message.as_str()),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(&record)? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        match self.failure {
            Some(f) => Err(f.into()),
            None => Ok(()),
        }
    }
}

/// Creates the parent directory of `path` if needed and writes `contents`.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Non-blank lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
