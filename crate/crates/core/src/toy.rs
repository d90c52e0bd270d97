//! Deterministic toy data for small end-to-end runs.
//!
//! The corpus has 200 sentences over a 40-token vocabulary (`<eos>`, 19
//! leader words `a00..a18`, 20 cycle words `b00..b19`). A sentence is a
//! leader, a start word, then 40 cycle words stepping by 1 (even leader) or
//! 3 (odd leader) modulo 20. Only the start word is not determined by the
//! preceding context; it is one of two options per leader.
//!
//! The QA set has 50 records of the form "ann has fox and bob has hen" /
//! "what does bob have ?" / "hen".

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::uncertainty::QaRecord;

pub const CORPUS_SENTENCES: usize = 200;
const LEADERS: usize = 19;
const CYCLE: usize = 20;
const RUN: usize = 40;

pub fn corpus() -> Vec<String> {
    (0..CORPUS_SENTENCES)
        .map(|s| {
            let a = s % LEADERS;
            let offset = if (s / LEADERS).is_multiple_of(2) { 0 } else { 7 };
            let step = if a.is_multiple_of(2) { 1 } else { 3 };
            let mut x = (a + offset) % CYCLE;
            let mut words = vec![format!("a{a:02}"), format!("b{x:02}")];
            for _ in 0..RUN {
                x = (x + step) % CYCLE;
                words.push(format!("b{x:02}"));
            }
            words.join(" ")
        })
        .collect()
}

pub const QA_RECORDS: usize = 50;
const NAMES: [&str; 10] = [
    "ann", "bob", "cat", "dan", "eve", "fay", "gus", "hal", "ivy", "jon",
];
const PETS: [&str; 8] = ["ant", "bee", "cow", "dog", "eel", "fox", "gnu", "hen"];

/// The 50-record probe set.
pub fn qa_records() -> Vec<QaRecord> {
    qa_dataset(QA_RECORDS, 0x5eed)
}

/// `n` distinct records drawn with `seed` (at most 10 * 9 * 8 * 7 * 2).
pub fn qa_dataset(n: usize, seed: u64) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<QaRecord> = Vec::with_capacity(n);
    while out.len() < n {
        let names: Vec<&str> = NAMES.choose_multiple(&mut rng, 2).copied().collect();
        let pets: Vec<&str> = PETS.choose_multiple(&mut rng, 2).copied().collect();
        let k = rng.random_range(0..2);
        let rec = QaRecord {
            context: format!(
                "{} has {} and {} has {}",
                names[0], pets[0], names[1], pets[1]
            ),
            question: format!("what does {} have ?", names[k]),
            answer: pets[k].to_string(),
        };
        if !out.contains(&rec) {
            out.push(rec);
        }
    }
    out
}

/// Training set for the probe model: every probe record plus the same
/// context asked about its other name, so the answer depends on the question.
pub fn qa_training_set() -> Vec<QaRecord> {
    let records = qa_records();
    let mut out = records.clone();
    for r in &records {
        let w: Vec<&str> = r.context.split_whitespace().collect();
        let asked = r.question.split_whitespace().nth(2);
        let (name, pet) = if asked == Some(w[0]) {
            (w[4], w[6])
        } else {
            (w[0], w[2])
        };
        out.push(QaRecord {
            context: r.context.clone(),
            question: format!("what does {name} have ?"),
            answer: pet.to_string(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tokenizer;

    #[test]
    fn corpus_shape() {
        let c = corpus();
        assert_eq!(c.len(), 200);
        let t = Tokenizer::word_level(&c.join("\n")).unwrap();
        assert_eq!(t.vocab_size(), 40);
        assert!(c.iter().all(|s| s.split_whitespace().count() == 42));
        assert_eq!(corpus(), c);
    }

    #[test]
    fn qa_shape() {
        let q = qa_records();
        assert_eq!(q.len(), 50);
        assert_eq!(qa_records(), q);
        for r in &q {
            let name = r.question.split_whitespace().nth(2).unwrap();
            let words: Vec<&str> = r.context.split_whitespace().collect();
            let at = words.iter().position(|w| *w == name).unwrap();
            assert_eq!(words[at + 2], r.answer);
        }
        let train = qa_training_set();
        assert_eq!(train.len(), 100);
        assert_eq!(&train[..50], &q[..]);
        assert!(train[50..]
            .iter()
            .zip(&q)
            .all(|(t, r)| t.context == r.context && t.answer != r.answer));
    }
}
