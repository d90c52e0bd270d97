//! Random-set training objective.
//!
//! `total = bce + alpha * m_r + beta * m_s`, where `bce` is binary
//! cross-entropy between predicted and target belief values, averaged over
//! unmasked positions and focal sets, and the two penalties act on the raw
//! (unrepaired) mass obtained from the predicted beliefs:
//!
//! * `m_r`, the mean over units of the summed negative parts of the masses;
//! * `m_s = max(0, mean over units of the mass total - 1)`.
//!
//! A "unit" is a single position or a whole sequence, see
//! [`PenaltyGranularity`]. The belief-to-mass map is linear, so penalty
//! gradients are pulled back with its transpose. Hinges use subgradient 0.

use serde::{Deserialize, Serialize};

use crate::belief::FocalSetBudget;
use crate::error::{Result, RslmError};
use crate::par::Execution;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyGranularity {
    /// Every unmasked position is a unit.
    #[default]
    Position,
    /// Every sequence is a unit, its raw mass the mean over its positions.
    Item,
}

impl std::str::FromStr for PenaltyGranularity {
    type Err = RslmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Self::Position),
            "item" => Ok(Self::Item),
            _ => Err(RslmError::InvalidArgument(format!(
                "unknown penalty granularity {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub granularity: PenaltyGranularity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            granularity: PenaltyGranularity::Position,
        }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(RslmError::InvalidArgument(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    #[serde(rename = "m_r")]
    pub mass_nonneg: f64,
    #[serde(rename = "m_s")]
    pub mass_sum: f64,
    pub total: f64,
}

/// Belief values laid out as `[batch][position][set]`, with a per-position
/// mask (`true` = counted in the loss).
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefBatch {
    pub batch: usize,
    pub positions: usize,
    pub sets: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl BeliefBatch {
    /// Unmasked batch.
    pub fn new(batch: usize, positions: usize, sets: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_mask(
            batch,
            positions,
            sets,
            values,
            vec![true; batch * positions],
        )
    }

    pub fn with_mask(
        batch: usize,
        positions: usize,
        sets: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != batch * positions * sets {
            return Err(RslmError::DimensionMismatch {
                expected: batch * positions * sets,
                actual: values.len(),
            });
        }
        if mask.len() != batch * positions {
            return Err(RslmError::DimensionMismatch {
                expected: batch * positions,
                actual: mask.len(),
            });
        }
        Ok(Self {
            batch,
            positions,
            sets,
            values,
            mask,
        })
    }

    pub fn at(&self, item: usize, position: usize) -> &[f64] {
        let start = (item * self.positions + position) * self.sets;
        &self.values[start..start + self.sets]
    }

    fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.batch, self.positions, self.sets) != (other.batch, other.positions, other.sets) {
            return Err(RslmError::InvalidArgument(format!(
                "shape mismatch: ({}, {}, {}) vs ({}, {}, {})",
                self.batch, self.positions, self.sets, other.batch, other.positions, other.sets
            )));
        }
        Ok(())
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn bce_term(p: f64, y: f64) -> f64 {
    let q = clamp(p);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

fn bce_derivative(p: f64, y: f64) -> f64 {
    if p <= EPS || p >= 1.0 - EPS {
        0.0
    } else {
        -y / p + (1.0 - y) / (1.0 - p)
    }
}

/// Mean binary cross-entropy over unmasked positions and focal sets.
pub fn bce_loss(pred: &BeliefBatch, target: &BeliefBatch) -> Result<f64> {
    bce_loss_with(pred, target, Execution::default())
}

pub fn bce_loss_with(pred: &BeliefBatch, target: &BeliefBatch, exec: Execution) -> Result<f64> {
    pred.same_shape(target)?;
    let n = pred.active();
    if n == 0 {
        return Err(RslmError::InvalidArgument("no unmasked positions".into()));
    }
    let s = pred.sets;
    let partial = exec.map_range(pred.batch * pred.positions, |row| {
        if !pred.mask[row] {
            return 0.0;
        }
        let p = &pred.values[row * s..(row + 1) * s];
        let y = &target.values[row * s..(row + 1) * s];
        p.iter().zip(y).map(|(&p, &y)| bce_term(p, y)).sum::<f64>()
    });
    Ok(partial.iter().sum::<f64>() / (n as f64 * s as f64))
}

/// Raw masses per penalty unit plus, for item units, the positions they pool.
struct Units {
    masses: Vec<Vec<f64>>,
    rows: Vec<Vec<usize>>,
}

fn penalty_units(
    pred: &BeliefBatch,
    budget: &FocalSetBudget,
    granularity: PenaltyGranularity,
    exec: Execution,
) -> Units {
    let s = pred.sets;
    let raw = exec.map_range(pred.batch * pred.positions, |row| {
        if !pred.mask[row] {
            return Vec::new();
        }
        let mut m = vec![0.0; s];
        budget.belief_to_mass_into(&pred.values[row * s..(row + 1) * s], &mut m);
        m
    });
    match granularity {
        PenaltyGranularity::Position => {
            let rows: Vec<Vec<usize>> = (0..raw.len())
                .filter(|&r| pred.mask[r])
                .map(|r| vec![r])
                .collect();
            let masses = raw.into_iter().filter(|m| !m.is_empty()).collect();
            Units { masses, rows }
        }
        PenaltyGranularity::Item => {
            let mut masses = Vec::new();
            let mut rows = Vec::new();
            for item in 0..pred.batch {
                let members: Vec<usize> = (item * pred.positions..(item + 1) * pred.positions)
                    .filter(|&r| pred.mask[r])
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = vec![0.0; s];
                for &r in &members {
                    for (a, x) in mean.iter_mut().zip(&raw[r]) {
                        *a += x;
                    }
                }
                let k = members.len() as f64;
                mean.iter_mut().for_each(|a| *a /= k);
                masses.push(mean);
                rows.push(members);
            }
            Units { masses, rows }
        }
    }
}

fn penalties_from(units: &Units) -> (f64, f64) {
    let u = units.masses.len() as f64;
    if units.masses.is_empty() {
        return (0.0, 0.0);
    }
    let neg: f64 = units
        .masses
        .iter()
        .map(|m| m.iter().map(|&x| (-x).max(0.0)).sum::<f64>())
        .sum();
    let total: f64 = units.masses.iter().map(|m| m.iter().sum::<f64>()).sum();
    (neg / u, (total / u - 1.0).max(0.0))
}

/// `(m_r, m_s)` for the raw masses induced by `pred`.
pub fn mass_penalties(
    pred: &BeliefBatch,
    budget: &FocalSetBudget,
    granularity: PenaltyGranularity,
) -> Result<(f64, f64)> {
    mass_penalties_with(pred, budget, granularity, Execution::default())
}

pub fn mass_penalties_with(
    pred: &BeliefBatch,
    budget: &FocalSetBudget,
    granularity: PenaltyGranularity,
    exec: Execution,
) -> Result<(f64, f64)> {
    if pred.sets != budget.len() {
        return Err(RslmError::DimensionMismatch {
            expected: budget.len(),
            actual: pred.sets,
        });
    }
    Ok(penalties_from(&penalty_units(
        pred,
        budget,
        granularity,
        exec,
    )))
}

pub fn total_loss(
    pred: &BeliefBatch,
    target: &BeliefBatch,
    budget: &FocalSetBudget,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_with(pred, target, budget, cfg, Execution::default())
}

pub fn total_loss_with(
    pred: &BeliefBatch,
    target: &BeliefBatch,
    budget: &FocalSetBudget,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let bce = bce_loss_with(pred, target, exec)?;
    let (mass_nonneg, mass_sum) = mass_penalties_with(pred, budget, cfg.granularity, exec)?;
    Ok(LossBreakdown {
        bce,
        mass_nonneg,
        mass_sum,
        total: bce + cfg.alpha * mass_nonneg + cfg.beta * mass_sum,
    })
}

/// Gradient of the total loss with respect to every predicted belief value,
/// in the layout of `pred.values`. Masked positions get zero.
pub fn loss_gradient(
    pred: &BeliefBatch,
    target: &BeliefBatch,
    budget: &FocalSetBudget,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(pred, target, budget, cfg, Execution::default())?.1)
}

pub fn loss_and_gradient(
    pred: &BeliefBatch,
    target: &BeliefBatch,
    budget: &FocalSetBudget,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    if pred.sets != budget.len() {
        return Err(RslmError::DimensionMismatch {
            expected: budget.len(),
            actual: pred.sets,
        });
    }
    let bce = bce_loss_with(pred, target, exec)?;
    let s = pred.sets;
    let scale = 1.0 / (pred.active() as f64 * s as f64);
    let mut grad = vec![0.0; pred.values.len()];
    exec.for_each_chunk_mut(&mut grad, s, |row, g| {
        if !pred.mask[row] {
            return;
        }
        let p = &pred.values[row * s..(row + 1) * s];
        let y = &target.values[row * s..(row + 1) * s];
        for ((g, &p), &y) in g.iter_mut().zip(p).zip(y) {
            *g = bce_derivative(p, y) * scale;
        }
    });

    let units = penalty_units(pred, budget, cfg.granularity, exec);
    let (mass_nonneg, mass_sum) = penalties_from(&units);
    let breakdown = LossBreakdown {
        bce,
        mass_nonneg,
        mass_sum,
        total: bce + cfg.alpha * mass_nonneg + cfg.beta * mass_sum,
    };
    if (cfg.alpha == 0.0 && cfg.beta == 0.0) || units.masses.is_empty() {
        return Ok((breakdown, grad));
    }

    let u = units.masses.len() as f64;
    let sum_active = {
        let total: f64 = units.masses.iter().map(|m| m.iter().sum::<f64>()).sum();
        total / u - 1.0 > 0.0
    };
    let unit_grads = exec.map_range(units.masses.len(), |k| {
        let gm: Vec<f64> = units.masses[k]
            .iter()
            .map(|&x| {
                let mut g = 0.0;
                if x < 0.0 {
                    g -= cfg.alpha / u;
                }
                if sum_active {
                    g += cfg.beta / u;
                }
                g
            })
            .collect();
        let mut gb = vec![0.0; s];
        budget.belief_to_mass_adjoint(&gm, &mut gb);
        gb
    });
    for (gb, rows) in unit_grads.iter().zip(&units.rows) {
        let share = 1.0 / rows.len() as f64;
        for &r in rows {
            for (g, x) in grad[r * s..(r + 1) * s].iter_mut().zip(gb) {
                *g += x * share;
            }
        }
    }
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::TokenId;
    use approx::assert_abs_diff_eq;

    fn pair_budget() -> FocalSetBudget {
        FocalSetBudget::from_clusters(2, Vec::<Vec<TokenId>>::new()).unwrap()
    }

    #[test]
    fn bce_at_one_half_is_ln2() {
        let p = BeliefBatch::new(1, 1, 4, vec![0.5; 4]).unwrap();
        assert_abs_diff_eq!(
            bce_loss(&p, &p).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn perfect_prediction_floor() {
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let p = BeliefBatch::new(1, 1, 4, y).unwrap();
        let l = bce_loss(&p, &p).unwrap();
        assert!(l <= -(1.0 - EPS).ln() + 1e-15, "{l}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = BeliefBatch::new(1, 2, 3, vec![0.5; 6]).unwrap();
        let b = BeliefBatch::new(2, 1, 3, vec![0.5; 6]).unwrap();
        assert!(bce_loss(&a, &b).is_err());
        assert!(BeliefBatch::new(1, 2, 3, vec![0.5; 5]).is_err());
    }

    #[test]
    fn valid_mass_has_no_penalty() {
        let b = FocalSetBudget::from_clusters(4, vec![vec![0, 1]]).unwrap();
        let gt = b.ground_truth_belief(1).unwrap().into_inner();
        let p = BeliefBatch::new(1, 1, b.len(), gt).unwrap();
        assert_eq!(
            mass_penalties(&p, &b, PenaltyGranularity::Position).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn analytic_penalties() {
        // Beliefs for masses (0.7, 0.6) on ({0}, {0,1}) over a one-cluster budget:
        // use the two-token budget with masses on {0} and the universal set.
        let b = pair_budget();
        let bel = |m: [f64; 3]| {
            let mut out = vec![0.0; 3];
            b.mass_to_belief_into(&m, &mut out);
            BeliefBatch::new(1, 1, 3, out).unwrap()
        };
        let (r, s) =
            mass_penalties(&bel([0.7, 0.0, 0.6]), &b, PenaltyGranularity::Position).unwrap();
        assert_abs_diff_eq!(r, 0.0);
        assert_abs_diff_eq!(s, 0.3, epsilon = 1e-12);
        let (r, s) =
            mass_penalties(&bel([1.2, 0.0, -0.2]), &b, PenaltyGranularity::Position).unwrap();
        assert_abs_diff_eq!(r, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_bce() {
        let b = pair_budget();
        let p = BeliefBatch::new(1, 2, 3, vec![0.9, 0.8, 0.3, 0.2, 0.1, 0.6]).unwrap();
        let y = BeliefBatch::new(1, 2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let cfg = LossConfig::new(0.0, 0.0).unwrap();
        let l = total_loss(&p, &y, &b, &cfg).unwrap();
        assert_eq!(l.total.to_bits(), l.bce.to_bits());
        assert!(l.mass_nonneg > 0.0);
    }

    #[test]
    fn weighted_total() {
        let cfg = LossConfig::new(0.01, 0.01).unwrap();
        let total = 0.5 + cfg.alpha * 0.2 + cfg.beta * 0.3;
        assert_abs_diff_eq!(total, 0.505, epsilon = 1e-15);
        assert!(LossConfig::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn bce_gradient_at_half() {
        let b = FocalSetBudget::from_clusters(3, vec![vec![0, 1]]).unwrap();
        let positions = 2;
        let p = BeliefBatch::new(1, positions, b.len(), vec![0.5; positions * b.len()]).unwrap();
        let mut y = vec![0.0; positions * b.len()];
        y[0] = 1.0;
        let y = BeliefBatch::new(1, positions, b.len(), y).unwrap();
        let g = loss_gradient(&p, &y, &b, &LossConfig::new(0.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(g[0], -2.0 / (b.len() * positions) as f64, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 2.0 / (b.len() * positions) as f64, epsilon = 1e-15);
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let b = pair_budget();
        let y = BeliefBatch::new(1, 1, 3, vec![0.3, 0.7, 1.0]).unwrap();
        let g = loss_gradient(&y, &y, &b, &LossConfig::new(0.0, 0.0).unwrap()).unwrap();
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        // The clamped set has a zero gradient.
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn masked_positions_are_ignored() {
        let b = pair_budget();
        let p = BeliefBatch::with_mask(
            1,
            2,
            3,
            vec![0.2, 0.3, 0.9, 0.5, 0.5, 0.5],
            vec![true, false],
        )
        .unwrap();
        let y = BeliefBatch::with_mask(
            1,
            2,
            3,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            vec![true, false],
        )
        .unwrap();
        let full = BeliefBatch::new(1, 1, 3, vec![0.2, 0.3, 0.9]).unwrap();
        let yfull = BeliefBatch::new(1, 1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let cfg = LossConfig::default();
        assert_eq!(
            total_loss(&p, &y, &b, &cfg).unwrap(),
            total_loss(&full, &yfull, &b, &cfg).unwrap()
        );
        let g = loss_gradient(&p, &y, &b, &cfg).unwrap();
        assert_eq!(&g[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn granularity_parses() {
        assert_eq!(
            "item".parse::<PenaltyGranularity>().unwrap(),
            PenaltyGranularity::Item
        );
        assert!("batch".parse::<PenaltyGranularity>().is_err());
    }
}
