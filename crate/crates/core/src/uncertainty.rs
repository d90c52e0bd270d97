//! Per-token and per-sequence uncertainty, and the corrupted-context probe.
//!
//! Token uncertainty is the entropy (nats) of the predicted distribution and,
//! for random-set models, the credal width of the predicted token. A sequence
//! aggregates its tokens by mean (default) or max.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::PignisticDistribution;
use crate::error::{Result, RslmError};
use crate::model::{generate, Model, TokenRecord};
use crate::par::Execution;

/// Shannon entropy in nats with `0 ln 0 = 0`. No validation.
pub fn token_entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

pub fn token_entropy(p: &PignisticDistribution) -> Result<f64> {
    if !p.is_valid() {
        return Err(RslmError::InvalidDistribution(
            "probabilities must be non-negative and sum to 1".into(),
        ));
    }
    Ok(token_entropy_of(p.probs()).max(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = RslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => Err(RslmError::InvalidArgument(format!(
                "unknown aggregation {s:?}"
            ))),
        }
    }
}

impl Aggregation {
    fn apply(self, xs: &[f64]) -> f64 {
        match self {
            Self::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            Self::Max => xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceUncertainty {
    pub entropies: Vec<f64>,
    /// Credal width of each chosen token; empty for softmax traces.
    pub widths: Vec<f64>,
    pub entropy: f64,
    pub width: Option<f64>,
    pub mode: Aggregation,
}

pub fn sequence_uncertainty(
    records: &[TokenRecord],
    mode: Aggregation,
) -> Result<SequenceUncertainty> {
    if records.is_empty() {
        return Err(RslmError::EmptyTrace);
    }
    let entropies: Vec<f64> = records.iter().map(|r| r.entropy).collect();
    let widths: Vec<f64> = records
        .iter()
        .filter_map(|r| r.credal.map(|c| c.width))
        .collect();
    let width = if widths.is_empty() {
        None
    } else if widths.len() == records.len() {
        Some(mode.apply(&widths))
    } else {
        return Err(RslmError::InvalidArgument(
            "trace mixes records with and without credal intervals".into(),
        ));
    };
    Ok(SequenceUncertainty {
        entropy: mode.apply(&entropies),
        entropies,
        widths,
        width,
        mode,
    })
}

/// One question-answering example. All fields are text over the model's
/// vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub context: String,
    pub question: String,
    pub answer: String,
}

impl QaRecord {
    pub fn prompt(&self) -> String {
        format!("{} {}", self.context, self.question)
    }

    /// Training text: prompt followed by the answer.
    pub fn document(&self) -> String {
        format!("{} {}", self.prompt(), self.answer)
    }
}

pub fn load_qa_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| RslmError::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn qa_to_jsonl(records: &[QaRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    #[default]
    None,
    /// Keep the context, ask another record's question.
    SwapQuestion,
    /// Keep the question, show another record's context.
    SwapChoices,
}

impl std::str::FromStr for Corruption {
    type Err = RslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "swap_question" => Ok(Self::SwapQuestion),
            "swap_choices" => Ok(Self::SwapChoices),
            _ => Err(RslmError::InvalidArgument(format!(
                "unknown corruption {s:?}"
            ))),
        }
    }
}

/// Uniformly random permutation of `0..n` with no fixed point, by rejection
/// of shuffles. Requires `n >= 2`.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(RslmError::DatasetTooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        for i in (1..n).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            return Ok(p);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Corrupted,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Clean => "clean",
            Self::Corrupted => "corrupted",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub corruption: Corruption,
    pub seed: u64,
    pub max_len: usize,
    pub aggregation: Aggregation,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            corruption: Corruption::SwapQuestion,
            seed: 0,
            max_len: 4,
            aggregation: Aggregation::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub condition: Condition,
    pub record: usize,
    /// Record whose question (or context) was swapped in; equals `record`
    /// for clean rows.
    pub paired_with: usize,
    pub prompt: String,
    pub expected: String,
    pub generated: String,
    pub correct: bool,
    pub tokens: usize,
    pub entropy: f64,
    pub credal_width: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub n: usize,
    pub accuracy: f64,
    pub entropy: MeanStd,
    pub credal_width: Option<MeanStd>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyUnit {
    #[default]
    Nats,
    Bits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config: ProbeConfig,
    pub entropy_unit: EntropyUnit,
    pub rows: Vec<ProbeRow>,
    pub summary: Vec<ConditionSummary>,
}

fn summarize(rows: &[ProbeRow]) -> Vec<ConditionSummary> {
    [Condition::Clean, Condition::Corrupted]
        .into_iter()
        .filter_map(|c| {
            let mine: Vec<&ProbeRow> = rows.iter().filter(|r| r.condition == c).collect();
            if mine.is_empty() {
                return None;
            }
            let entropies: Vec<f64> = mine.iter().map(|r| r.entropy).collect();
            let widths: Vec<f64> = mine.iter().filter_map(|r| r.credal_width).collect();
            Some(ConditionSummary {
                condition: c,
                n: mine.len(),
                accuracy: mine.iter().filter(|r| r.correct).count() as f64 / mine.len() as f64,
                entropy: MeanStd::of(&entropies),
                credal_width: (widths.len() == mine.len()).then(|| MeanStd::of(&widths)),
            })
        })
        .collect()
}

impl ProbeReport {
    pub fn from_rows(config: ProbeConfig, entropy_unit: EntropyUnit, rows: Vec<ProbeRow>) -> Self {
        let summary = summarize(&rows);
        Self {
            config,
            entropy_unit,
            rows,
            summary,
        }
    }

    pub fn condition(&self, c: Condition) -> Option<&ConditionSummary> {
        self.summary.iter().find(|s| s.condition == c)
    }

    /// The same report with entropies converted from nats to bits.
    pub fn in_bits(&self) -> Self {
        if self.entropy_unit == EntropyUnit::Bits {
            return self.clone();
        }
        let mut rows = self.rows.clone();
        for r in &mut rows {
            r.entropy /= std::f64::consts::LN_2;
        }
        Self::from_rows(self.config, EntropyUnit::Bits, rows)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "condition,record,paired_with,expected,generated,correct,tokens,entropy,credal_width\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.condition,
                r.record,
                r.paired_with,
                csv_field(&r.expected),
                csv_field(&r.generated),
                u8::from(r.correct),
                r.tokens,
                r.entropy,
                r.credal_width.map(|w| w.to_string()).unwrap_or_default()
            );
        }
        s
    }

    /// Mean and standard deviation per metric and condition.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let unit = match self.entropy_unit {
            EntropyUnit::Nats => "nats",
            EntropyUnit::Bits => "bits",
        };
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>9} {:>22} {:>16}",
            "condition",
            "n",
            "accuracy",
            format!("entropy ({unit})"),
            "credal width"
        );
        for c in &self.summary {
            let width = c
                .credal_width
                .map(|w| format!("{:.2} ± {:.2}", w.mean, w.std))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<10} {:>4} {:>9.3} {:>22} {:>16}",
                c.condition.to_string(),
                c.n,
                c.accuracy,
                format!("{:.2} ± {:.2}", c.entropy.mean, c.entropy.std),
                width
            );
        }
        s
    }
}

/// Quotes a CSV field when it contains a separator, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Generates an answer for every record under clean context and, unless
/// `corruption` is `None`, under a derangement-paired corruption. Records are
/// independent and may run in parallel; rows come back in input order.
pub fn run_probe(
    model: &Model,
    records: &[QaRecord],
    cfg: &ProbeConfig,
    exec: Execution,
) -> Result<ProbeReport> {
    if records.is_empty() {
        return Err(RslmError::DatasetTooSmall(0));
    }
    let mut jobs: Vec<(Condition, usize, usize)> = (0..records.len())
        .map(|i| (Condition::Clean, i, i))
        .collect();
    if cfg.corruption != Corruption::None {
        let pairing = derangement(records.len(), cfg.seed)?;
        jobs.extend(
            pairing
                .iter()
                .enumerate()
                .map(|(i, &j)| (Condition::Corrupted, i, j)),
        );
    }
    let rows = exec.map(&jobs, |&(condition, i, j)| -> Result<ProbeRow> {
        let (context, question, expected) = match (condition, cfg.corruption) {
            (Condition::Clean, _) | (_, Corruption::None) => (
                &records[i].context,
                &records[i].question,
                &records[i].answer,
            ),
            (Condition::Corrupted, Corruption::SwapQuestion) => (
                &records[i].context,
                &records[j].question,
                &records[j].answer,
            ),
            (Condition::Corrupted, Corruption::SwapChoices) => (
                &records[j].context,
                &records[i].question,
                &records[i].answer,
            ),
        };
        let prompt = format!("{context} {question}");
        let ids = model.tokenizer().encode(&prompt)?;
        let trace = generate(model, &ids, cfg.max_len)?;
        let seq = sequence_uncertainty(&trace.records, cfg.aggregation)?;
        let generated = model.tokenizer().decode(&trace.tokens())?;
        Ok(ProbeRow {
            condition,
            record: i,
            paired_with: j,
            prompt,
            correct: generated.trim() == expected.trim(),
            expected: expected.clone(),
            generated,
            tokens: trace.records.len(),
            entropy: seq.entropy,
            credal_width: seq.width,
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport::from_rows(*cfg, EntropyUnit::Nats, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CredalRecord;
    use approx::assert_abs_diff_eq;

    fn record(entropy: f64, width: Option<f64>) -> TokenRecord {
        TokenRecord {
            step: 0,
            token_id: 0,
            token: "x".into(),
            distribution: vec![1.0],
            entropy,
            credal: width.map(|w| CredalRecord {
                lower: 0.0,
                upper: w,
                width: w,
            }),
            widths: None,
        }
    }

    #[test]
    fn entropy_examples() {
        let uniform = PignisticDistribution::new(vec![0.25; 4]);
        assert_abs_diff_eq!(token_entropy(&uniform).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let one_hot = PignisticDistribution::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(token_entropy(&one_hot).unwrap(), 0.0);
        let bad = PignisticDistribution::new(vec![0.5, 0.6]);
        assert!(token_entropy(&bad).is_err());
    }

    #[test]
    fn aggregation_modes() {
        let recs = [record(0.2, Some(0.1)), record(0.8, Some(0.3))];
        let mean = sequence_uncertainty(&recs, Aggregation::Mean).unwrap();
        let max = sequence_uncertainty(&recs, Aggregation::Max).unwrap();
        assert_abs_diff_eq!(mean.entropy, 0.5, epsilon = 1e-15);
        assert_eq!(max.entropy, 0.8);
        assert_abs_diff_eq!(mean.width.unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(max.width, Some(0.3));
        let one = sequence_uncertainty(&recs[..1], Aggregation::Max).unwrap();
        assert_eq!(
            (one.entropy, one.width),
            (
                sequence_uncertainty(&recs[..1], Aggregation::Mean)
                    .unwrap()
                    .entropy,
                Some(0.1)
            )
        );
        assert!(matches!(
            sequence_uncertainty(&[], Aggregation::Mean),
            Err(RslmError::EmptyTrace)
        ));
        let softmax = sequence_uncertainty(&[record(0.3, None)], Aggregation::Mean).unwrap();
        assert!(softmax.widths.is_empty() && softmax.width.is_none());
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        for seed in 0..50 {
            let p = derangement(10, seed).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..10).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
        assert_eq!(derangement(2, 7).unwrap(), vec![1, 0]);
        assert!(matches!(
            derangement(1, 0),
            Err(RslmError::DatasetTooSmall(1))
        ));
    }

    #[test]
    fn population_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a b"), "a b");
        assert_eq!(csv_field("a,\"b\""), "\"a,\"\"b\"\"\"");
    }
}
