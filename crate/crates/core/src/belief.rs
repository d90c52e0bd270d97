//! Belief-function calculus over a budgeted family of focal sets.
//!
//! A [`FocalSetBudget`] fixes which token sets may carry mass: all `T`
//! singletons (ids `0..T`, so the singleton of token `t` has id `t`), then the
//! non-singleton clusters, then the universal set as the last id. Mass and
//! belief vectors store one value per set id.
//!
//! The conversions between mass and belief are linear maps restricted to the
//! budget:
//!
//! * `Bel(A) = sum of m(B)` over budget sets `B ⊆ A`;
//! * `m(A) = Bel(A) - sum of m(B)` over budget sets `B ⊊ A`, evaluated in
//!   nondecreasing cardinality order.
//!
//! The second map does not clip anything, so a belief vector produced by a
//! network can yield negative masses or masses that do not sum to one.
//! [`FocalSetBudget::repair_mass`] turns such a raw mass function into a valid one.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RslmError};
use crate::par::Execution;

pub type TokenId = u32;

/// Absolute tolerance for "sums to one" and round-trip checks.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Ordered list of unique token strings; the position of a string is its id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(RslmError::InvalidVocabulary("vocabulary is empty".into()));
        }
        if tokens.len() > TokenId::MAX as usize {
            return Err(RslmError::InvalidVocabulary(format!(
                "{} tokens exceed the id range",
                tokens.len()
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(RslmError::InvalidVocabulary(format!(
                    "duplicate token {tok:?}"
                )));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = RslmError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// A non-empty set of token ids, stored sorted and without duplicates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FocalSet {
    members: Vec<TokenId>,
}

impl FocalSet {
    fn from_sorted(members: Vec<TokenId>) -> Self {
        debug_assert!(!members.is_empty());
        debug_assert!(members.windows(2).all(|w| w[0] < w[1]));
        Self { members }
    }

    pub fn members(&self) -> &[TokenId] {
        &self.members
    }

    pub fn cardinality(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.members.binary_search(&token).is_ok()
    }

    pub fn is_subset_of(&self, other: &FocalSet) -> bool {
        is_sorted_subset(&self.members, &other.members)
    }
}

fn is_sorted_subset(small: &[TokenId], big: &[TokenId]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let mut it = big.iter();
    'outer: for &x in small {
        for &y in it.by_ref() {
            if y == x {
                continue 'outer;
            }
            if y > x {
                return false;
            }
        }
        return false;
    }
    true
}

/// On-disk form of a budget: only the non-singleton, non-universal sets are
/// required; singletons and the universal set are regenerated on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetFile {
    pub vocab_size: usize,
    pub sets: Vec<Vec<TokenId>>,
}

/// The family of focal sets over which beliefs are predicted.
#[derive(Clone, Debug)]
pub struct FocalSetBudget {
    vocab_size: usize,
    sets: Vec<FocalSet>,
    by_cardinality: Vec<u32>,
    subset_index: Vec<Vec<u32>>,
    containing_index: Vec<Vec<u32>>,
}

impl PartialEq for FocalSetBudget {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size && self.sets == other.sets
    }
}

impl FocalSetBudget {
    /// Builds a budget from arbitrary candidate clusters.
    ///
    /// Members are sorted and deduplicated. Candidates that are singletons,
    /// that cover the whole vocabulary, or that repeat an earlier candidate
    /// are dropped; the remaining clusters keep their input order.
    pub fn from_clusters<I>(vocab_size: usize, clusters: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<TokenId>>,
    {
        Self::from_clusters_with(vocab_size, clusters, Execution::default())
    }

    pub fn from_clusters_with<I>(vocab_size: usize, clusters: I, exec: Execution) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<TokenId>>,
    {
        if vocab_size < 2 {
            return Err(RslmError::InvalidBudget(format!(
                "vocabulary size must be at least 2, got {vocab_size}"
            )));
        }
        if vocab_size > TokenId::MAX as usize {
            return Err(RslmError::InvalidBudget(format!(
                "vocabulary size {vocab_size} exceeds the id range"
            )));
        }
        let mut sets: Vec<FocalSet> = (0..vocab_size as TokenId)
            .map(|t| FocalSet::from_sorted(vec![t]))
            .collect();
        let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
        for mut members in clusters {
            if members.is_empty() {
                return Err(RslmError::InvalidBudget("empty focal set".into()));
            }
            members.sort_unstable();
            members.dedup();
            if let Some(&bad) = members.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(RslmError::TokenOutOfRange {
                    token: bad as usize,
                    vocab_size,
                });
            }
            if members.len() == 1 || members.len() == vocab_size {
                continue;
            }
            if seen.insert(members.clone()) {
                sets.push(FocalSet::from_sorted(members));
            }
        }
        sets.push(FocalSet::from_sorted((0..vocab_size as TokenId).collect()));
        Ok(Self::index(vocab_size, sets, exec))
    }

    /// Every non-empty subset of a `vocab_size`-token vocabulary.
    ///
    /// Clusters are ordered by cardinality and then by bitmask.
    pub fn power_set(vocab_size: usize) -> Result<Self> {
        if !(2..=16).contains(&vocab_size) {
            return Err(RslmError::InvalidBudget(format!(
                "power-set budgets support 2..=16 tokens, got {vocab_size}"
            )));
        }
        let mut masks: Vec<u32> = (1u32..(1 << vocab_size)).collect();
        masks.sort_by_key(|m| (m.count_ones(), *m));
        let clusters = masks.into_iter().map(|mask| {
            (0..vocab_size as TokenId)
                .filter(|t| mask & (1 << t) != 0)
                .collect::<Vec<_>>()
        });
        Self::from_clusters(vocab_size, clusters)
    }

    fn index(vocab_size: usize, sets: Vec<FocalSet>, exec: Execution) -> Self {
        let n = sets.len();
        let mut containing_index: Vec<Vec<u32>> = vec![Vec::new(); vocab_size];
        for (id, set) in sets.iter().enumerate() {
            for &t in set.members() {
                containing_index[t as usize].push(id as u32);
            }
        }
        // Any strict superset of B contains B's first member, so only the sets
        // containing that member need checking.
        let supersets: Vec<Vec<u32>> = exec.map_range(n, |b| {
            let small = &sets[b];
            containing_index[small.members[0] as usize]
                .iter()
                .copied()
                .filter(|&a| {
                    let big = &sets[a as usize];
                    big.cardinality() > small.cardinality() && small.is_subset_of(big)
                })
                .collect()
        });
        let mut subset_index: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (b, sup) in supersets.iter().enumerate() {
            for &a in sup {
                subset_index[a as usize].push(b as u32);
            }
        }
        let mut by_cardinality: Vec<u32> = (0..n as u32).collect();
        by_cardinality.sort_by_key(|&id| (sets[id as usize].cardinality(), id));
        Self {
            vocab_size,
            sets,
            by_cardinality,
            subset_index,
            containing_index,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of focal sets, universal set included.
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sets(&self) -> &[FocalSet] {
        &self.sets
    }

    pub fn set(&self, id: usize) -> &FocalSet {
        &self.sets[id]
    }

    pub fn singleton_id(&self, token: TokenId) -> usize {
        token as usize
    }

    pub fn universal_id(&self) -> usize {
        self.sets.len() - 1
    }

    /// Ids of the non-singleton, non-universal sets.
    pub fn cluster_ids(&self) -> std::ops::Range<usize> {
        self.vocab_size..self.sets.len() - 1
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_ids().len()
    }

    /// Ids of the budget sets that are strict subsets of set `id`, ascending.
    pub fn subsets(&self, id: usize) -> &[u32] {
        &self.subset_index[id]
    }

    /// Ids of the budget sets containing `token`, ascending.
    pub fn containing(&self, token: TokenId) -> &[u32] {
        &self.containing_index[token as usize]
    }

    /// All set ids in nondecreasing cardinality order, ties by id.
    pub fn cardinality_order(&self) -> &[u32] {
        &self.by_cardinality
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(RslmError::DimensionMismatch {
                expected: self.len(),
                actual: len,
            });
        }
        Ok(())
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.vocab_size {
            return Err(RslmError::TokenOutOfRange {
                token: token as usize,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    pub fn mass_to_belief(&self, m: &MassFunction) -> Result<BeliefVector> {
        self.check_len(m.len())?;
        let mut out = vec![0.0; self.len()];
        self.mass_to_belief_into(m.values(), &mut out);
        Ok(BeliefVector(out))
    }

    /// Slice form of [`Self::mass_to_belief`]; both slices have length `self.len()`.
    pub fn mass_to_belief_into(&self, mass: &[f64], bel: &mut [f64]) {
        for (a, out) in bel.iter_mut().enumerate() {
            let mut acc = mass[a];
            for &b in &self.subset_index[a] {
                acc += mass[b as usize];
            }
            *out = acc;
        }
    }

    /// Raw mass function whose budget-restricted belief reproduces `bel`.
    pub fn belief_to_mass(&self, bel: &BeliefVector) -> Result<MassFunction> {
        self.check_len(bel.len())?;
        let mut out = vec![0.0; self.len()];
        self.belief_to_mass_into(bel.values(), &mut out);
        Ok(MassFunction(out))
    }

    /// Slice form of [`Self::belief_to_mass`]; both slices have length `self.len()`.
    pub fn belief_to_mass_into(&self, bel: &[f64], mass: &mut [f64]) {
        for &a in &self.by_cardinality {
            let a = a as usize;
            let mut acc = bel[a];
            for &b in &self.subset_index[a] {
                acc -= mass[b as usize];
            }
            mass[a] = acc;
        }
    }

    /// Transpose of the belief-to-mass map: given `d loss / d mass`, writes
    /// `d loss / d belief`.
    pub fn belief_to_mass_adjoint(&self, grad_mass: &[f64], grad_bel: &mut [f64]) {
        let mut acc = grad_mass.to_vec();
        for &a in self.by_cardinality.iter().rev() {
            let a = a as usize;
            let g = acc[a];
            grad_bel[a] = g;
            if g != 0.0 {
                for &b in &self.subset_index[a] {
                    acc[b as usize] -= g;
                }
            }
        }
    }

    /// Clips negative masses, rescales if the total exceeds one and gives
    /// any deficit to the universal set. Valid input is returned unchanged.
    pub fn repair_mass(&self, m: &MassFunction) -> Result<MassFunction> {
        self.check_len(m.len())?;
        if m.is_valid() {
            return Ok(m.clone());
        }
        let mut v: Vec<f64> = m
            .values()
            .iter()
            .map(|&x| if x > 0.0 && x.is_finite() { x } else { 0.0 })
            .collect();
        let total: f64 = v.iter().sum();
        if total > 1.0 {
            v.iter_mut().for_each(|x| *x /= total);
        } else if total < 1.0 {
            let u = self.universal_id();
            v[u] += 1.0 - total;
        }
        Ok(MassFunction(v))
    }

    pub fn pignistic(&self, m: &MassFunction) -> Result<PignisticDistribution> {
        self.check_len(m.len())?;
        m.ensure_valid()?;
        let probs = (0..self.vocab_size as TokenId)
            .map(|t| {
                self.containing(t)
                    .iter()
                    .map(|&a| m.0[a as usize] / self.sets[a as usize].cardinality() as f64)
                    .sum()
            })
            .collect();
        Ok(PignisticDistribution(probs))
    }

    /// Lower and upper probability of `token` over the credal set of `m`.
    pub fn credal_bounds(&self, m: &MassFunction, token: TokenId) -> Result<CredalInterval> {
        self.check_len(m.len())?;
        self.check_token(token)?;
        m.ensure_valid()?;
        Ok(self.credal_bounds_unchecked(m.values(), token))
    }

    fn credal_bounds_unchecked(&self, mass: &[f64], token: TokenId) -> CredalInterval {
        let lower = mass[self.singleton_id(token)];
        let upper: f64 = self
            .containing(token)
            .iter()
            .map(|&a| mass[a as usize])
            .sum();
        CredalInterval {
            token,
            lower,
            upper,
        }
    }

    /// Credal intervals for every token.
    pub fn credal_intervals(&self, m: &MassFunction) -> Result<Vec<CredalInterval>> {
        self.check_len(m.len())?;
        m.ensure_valid()?;
        Ok((0..self.vocab_size as TokenId)
            .map(|t| self.credal_bounds_unchecked(m.values(), t))
            .collect())
    }

    /// Belief-encoded target: 1 on every set containing `token`, 0 elsewhere.
    pub fn ground_truth_belief(&self, token: TokenId) -> Result<BeliefVector> {
        self.check_token(token)?;
        let mut v = vec![0.0; self.len()];
        self.ground_truth_into(token, &mut v);
        Ok(BeliefVector(v))
    }

    pub(crate) fn ground_truth_into(&self, token: TokenId, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for &a in self.containing(token) {
            out[a as usize] = 1.0;
        }
    }

    pub fn to_file(&self) -> BudgetFile {
        BudgetFile {
            vocab_size: self.vocab_size,
            sets: self
                .cluster_ids()
                .map(|id| self.sets[id].members.clone())
                .collect(),
        }
    }

    pub fn from_file(file: BudgetFile) -> Result<Self> {
        Self::from_clusters(file.vocab_size, file.sets)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("budget file serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json();
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let file: BudgetFile = serde_json::from_str(&text)
            .map_err(|e| RslmError::format(path, format!("malformed budget file: {e}")))?;
        Self::from_file(file)
    }
}

/// One mass value per focal set id. May be raw (unrepaired).
#[derive(Clone, Debug, PartialEq)]
pub struct MassFunction(Vec<f64>);

impl MassFunction {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Non-negative and summing to one within [`MASS_TOLERANCE`].
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&x| x >= 0.0 && x.is_finite())
            && (self.total() - 1.0).abs() <= MASS_TOLERANCE
    }

    fn ensure_valid(&self) -> Result<()> {
        if let Some((i, x)) = self
            .0
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x >= 0.0 && x.is_finite()))
        {
            return Err(RslmError::InvalidMass(format!("mass of set {i} is {x}")));
        }
        let total = self.total();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(RslmError::InvalidMass(format!("masses sum to {total}")));
        }
        Ok(())
    }
}

/// One belief value per focal set id.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefVector(Vec<f64>);

impl BeliefVector {
    /// Accepts values in `[0, 1]` (with [`MASS_TOLERANCE`] slack).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, x)) = values
            .iter()
            .enumerate()
            .find(|(_, &x)| !(-MASS_TOLERANCE..=1.0 + MASS_TOLERANCE).contains(&x))
        {
            return Err(RslmError::InvalidBelief(format!(
                "belief of set {i} is {x}, outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PignisticDistribution(Vec<f64>);

impl PignisticDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.0) as TokenId
    }

    pub fn is_valid(&self) -> bool {
        !self.0.is_empty()
            && self.0.iter().all(|&p| p >= 0.0 && p.is_finite())
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= MASS_TOLERANCE
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredalInterval {
    pub token: TokenId,
    pub lower: f64,
    pub upper: f64,
}

impl CredalInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}
