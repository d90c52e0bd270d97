//! Belief calculus checked against independent brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rslm::belief::{FocalSetBudget, MassFunction, TokenId};

fn is_subset(small: &[TokenId], big: &[TokenId]) -> bool {
    small.iter().all(|x| big.contains(x))
}

/// Bel(A) by a direct double loop over all budget pairs.
fn belief_oracle(budget: &FocalSetBudget, mass: &[f64]) -> Vec<f64> {
    let sets = budget.sets();
    sets.iter()
        .map(|a| {
            sets.iter()
                .zip(mass)
                .filter(|(b, _)| is_subset(b.members(), a.members()))
                .map(|(_, &m)| m)
                .sum()
        })
        .collect()
}

fn random_partition_budget(rng: &mut ChaCha8Rng, vocab: usize) -> FocalSetBudget {
    let groups = rng.random_range(1..=vocab);
    let mut clusters = vec![Vec::new(); groups];
    for t in 0..vocab as TokenId {
        clusters[rng.random_range(0..groups)].push(t);
    }
    FocalSetBudget::from_clusters(vocab, clusters.into_iter().filter(|c| !c.is_empty())).unwrap()
}

/// Valid mass with `focal` randomly chosen sets carrying positive mass.
fn random_mass(rng: &mut ChaCha8Rng, n: usize, focal: usize) -> MassFunction {
    let mut v = vec![0.0; n];
    for _ in 0..focal {
        v[rng.random_range(0..n)] += rng.random_range(0.01..1.0);
    }
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    MassFunction::new(v)
}

/// Every distribution obtained by sending each focal set's mass to one of
/// its members.
fn vertices(budget: &FocalSetBudget, mass: &[f64]) -> Vec<Vec<f64>> {
    let focal: Vec<usize> = (0..mass.len()).filter(|&i| mass[i] > 0.0).collect();
    let mut out = Vec::new();
    let mut choice = vec![0usize; focal.len()];
    loop {
        let mut p = vec![0.0; budget.vocab_size()];
        for (k, &a) in focal.iter().enumerate() {
            p[budget.set(a).members()[choice[k]] as usize] += mass[a];
        }
        out.push(p);
        let mut k = 0;
        loop {
            if k == focal.len() {
                return out;
            }
            choice[k] += 1;
            if choice[k] < budget.set(focal[k]).cardinality() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn mass_to_belief_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let budget = random_partition_budget(&mut rng, 5);
        let focal = rng.random_range(1..=budget.len());
        let m = random_mass(&mut rng, budget.len(), focal);
        let bel = budget.mass_to_belief(&m).unwrap();
        for (got, want) in bel.values().iter().zip(belief_oracle(&budget, m.values())) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn round_trip_recovers_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let vocab = rng.random_range(2..=12);
        let budget = random_partition_budget(&mut rng, vocab);
        let focal = rng.random_range(1..=budget.len());
        let m = random_mass(&mut rng, budget.len(), focal);
        let back = budget
            .belief_to_mass(&budget.mass_to_belief(&m).unwrap())
            .unwrap();
        for (x, y) in back.values().iter().zip(m.values()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn credal_bounds_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let vocab = rng.random_range(2..=6);
        let budget = FocalSetBudget::power_set(vocab).unwrap();
        let focal = rng.random_range(1..=5);
        let m = random_mass(&mut rng, budget.len(), focal);
        let bel = budget.mass_to_belief(&m).unwrap();
        let verts = vertices(&budget, m.values());
        for p in &verts {
            for (a, set) in budget.sets().iter().enumerate() {
                let pa: f64 = set.members().iter().map(|&t| p[t as usize]).sum();
                assert!(bel.values()[a] <= pa + 1e-12);
            }
        }
        for t in 0..vocab as TokenId {
            let iv = budget.credal_bounds(&m, t).unwrap();
            let lo = verts
                .iter()
                .map(|p| p[t as usize])
                .fold(f64::INFINITY, f64::min);
            let hi = verts
                .iter()
                .map(|p| p[t as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((iv.lower - lo).abs() <= 1e-9);
            assert!((iv.upper - hi).abs() <= 1e-9);
        }
    }
}

#[test]
fn partition_ground_truth_repairs_to_singleton() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let vocab = rng.random_range(2..=20);
        let budget = random_partition_budget(&mut rng, vocab);
        let t = rng.random_range(0..vocab) as TokenId;
        let raw = budget
            .belief_to_mass(&budget.ground_truth_belief(t).unwrap())
            .unwrap();
        let m = budget.repair_mass(&raw).unwrap();
        for (i, &x) in m.values().iter().enumerate() {
            assert_eq!(x, if i == t as usize { 1.0 } else { 0.0 });
        }
    }
}

fn budget_and_mass() -> impl Strategy<Value = (FocalSetBudget, MassFunction)> {
    (2usize..=8, any::<u64>()).prop_map(|(vocab, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let budget = if vocab <= 5 && rng.random_bool(0.5) {
            FocalSetBudget::power_set(vocab).unwrap()
        } else {
            random_partition_budget(&mut rng, vocab)
        };
        let focal = rng.random_range(1..=budget.len());
        let m = random_mass(&mut rng, budget.len(), focal);
        (budget, m)
    })
}

proptest! {
    #[test]
    fn belief_is_monotone((budget, m) in budget_and_mass()) {
        let bel = budget.mass_to_belief(&m).unwrap();
        for a in 0..budget.len() {
            for &b in budget.subsets(a) {
                prop_assert!(bel.values()[b as usize] <= bel.values()[a] + 1e-12);
            }
        }
    }

    #[test]
    fn pignistic_is_inside_credal_interval((budget, m) in budget_and_mass()) {
        let p = budget.pignistic(&m).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for iv in budget.credal_intervals(&m).unwrap() {
            let bet = p.probs()[iv.token as usize];
            prop_assert!(iv.lower <= bet && bet <= iv.upper);
            prop_assert!(0.0 <= iv.lower && iv.upper <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn repair_is_idempotent_and_valid(
        vocab in 2usize..8,
        raw in proptest::collection::vec(-1.0f64..2.0, 1..64),
    ) {
        let budget = FocalSetBudget::from_clusters(vocab, vec![(0..vocab as TokenId / 2 + 1).collect()]).unwrap();
        let mut v = raw;
        v.resize(budget.len(), 0.0);
        let once = budget.repair_mass(&MassFunction::new(v)).unwrap();
        prop_assert!(once.is_valid());
        let twice = budget.repair_mass(&once).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn credal_width_is_non_singleton_mass((budget, m) in budget_and_mass()) {
        for t in 0..budget.vocab_size() as TokenId {
            let iv = budget.credal_bounds(&m, t).unwrap();
            let non_singleton: f64 = budget
                .containing(t)
                .iter()
                .filter(|&&a| budget.set(a as usize).cardinality() > 1)
                .map(|&a| m.values()[a as usize])
                .sum();
            prop_assert!((iv.width() - non_singleton).abs() <= 1e-12);
        }
    }
}
