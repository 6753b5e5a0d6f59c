//! Control-seeded initialization, fitness-proportionate breeding and top-n
//! retention.
//!
//! The generational loop itself lives in [`crate::experiment`], which applies
//! these operators as logged state transitions. Everything here is a pure
//! function of its inputs and an explicit RNG.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::FieldError;
use crate::space::{Genome, SearchSpace};
use crate::stats::{self, FitnessEstimate, IntervalMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Active,
    Discarded,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub genome: Genome,
    pub birth_generation: u32,
    /// Lifetime impressions.
    pub impressions: u64,
    /// Lifetime conversions; never exceeds `impressions`.
    pub conversions: u64,
    /// Impressions received in the current generation, counted against the maturity age.
    pub generation_impressions: u64,
    pub status: CandidateStatus,
}

impl Candidate {
    pub fn new(id: u64, genome: Genome, birth_generation: u32) -> Self {
        Self {
            id,
            genome,
            birth_generation,
            impressions: 0,
            conversions: 0,
            generation_impressions: 0,
            status: CandidateStatus::Active,
        }
    }

    pub fn control(id: u64, genome: Genome) -> Self {
        Self {
            status: CandidateStatus::Control,
            ..Self::new(id, genome, 0)
        }
    }

    pub fn rate(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.conversions as f64 / self.impressions as f64
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == CandidateStatus::Active
    }

    pub fn is_control(&self) -> bool {
        self.status == CandidateStatus::Control
    }

    /// Active or control: may still be served.
    pub fn is_live(&self) -> bool {
        self.status != CandidateStatus::Discarded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    /// One cut at an element boundary; head from the first parent, tail from the second.
    #[default]
    SinglePoint,
    /// Each element independently from either parent.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    /// Candidates retained (and bred) per generation.
    pub population_size: usize,
    /// New impressions each active candidate needs per generation.
    pub maturity_age: u64,
    pub mutation_probability: f64,
    pub max_generations: u32,
    pub rng_seed: u64,
    /// Upper bound on the initial population, Control included.
    pub initial_population_cap: usize,
    pub control_holdout_fraction: f64,
    pub crossover: CrossoverKind,
    /// Re-draws allowed when an offspring duplicates a live genome.
    pub duplicate_retries: u32,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 8,
            maturity_age: 2000,
            mutation_probability: 0.2,
            max_generations: 4,
            rng_seed: 42,
            initial_population_cap: 64,
            control_holdout_fraction: 0.1,
            crossover: CrossoverKind::SinglePoint,
            duplicate_retries: 20,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if self.population_size < 2 {
            errors.push(FieldError::new("evolution.population_size", "must be ≥ 2"));
        }
        if self.maturity_age < 1 {
            errors.push(FieldError::new("evolution.maturity_age", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.mutation_probability) {
            errors.push(FieldError::new(
                "evolution.mutation_probability",
                "must lie in [0, 1]",
            ));
        }
        if self.max_generations < 1 {
            errors.push(FieldError::new("evolution.max_generations", "must be ≥ 1"));
        }
        if self.initial_population_cap < 1 {
            errors.push(FieldError::new(
                "evolution.initial_population_cap",
                "must be ≥ 1",
            ));
        }
        if !(0.0..1.0).contains(&self.control_holdout_fraction) {
            errors.push(FieldError::new(
                "evolution.control_holdout_fraction",
                "must lie in [0, 1)",
            ));
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEstimate {
    pub candidate_id: u64,
    pub estimate: FitnessEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u32,
    /// Cumulative estimates of every non-control candidate judged this generation, best first.
    pub estimates: Vec<CandidateEstimate>,
    pub control: Option<FitnessEstimate>,
    pub retained: Vec<u64>,
    pub discarded: Vec<u64>,
    pub best_candidate_id: Option<u64>,
    pub total_interactions: u64,
}

/// Control plus its single-change neighbours, sampled down to the cap.
///
/// Ids run from 0 (Control) in element-then-value order of the neighbours.
pub fn initialize_population<R: Rng + ?Sized>(
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Vec<Candidate> {
    let control = space.control();
    let mut neighbors = Vec::with_capacity(space.neighbor_count());
    for element in 0..space.element_count() {
        for value in 1..space.value_count(element) {
            neighbors.push(control.with_choice(element, value));
        }
    }
    let room = cfg.initial_population_cap.saturating_sub(1);
    if neighbors.len() > room {
        let mut keep = index::sample(rng, neighbors.len(), room).into_vec();
        keep.sort_unstable();
        neighbors = keep.into_iter().map(|i| neighbors[i].clone()).collect();
    }
    std::iter::once(Candidate::control(0, control))
        .chain(
            neighbors
                .into_iter()
                .enumerate()
                .map(|(i, genome)| Candidate::new(i as u64 + 1, genome, 0)),
        )
        .collect()
}

/// Fitness-proportionate choice over `pool`; uniform when every rate is zero.
///
/// # Panics
/// If `pool` is empty.
pub fn select_parent<'a, R: Rng + ?Sized>(pool: &[&'a Candidate], rng: &mut R) -> &'a Candidate {
    assert!(!pool.is_empty(), "selection from an empty pool");
    let total: f64 = pool.iter().map(|c| c.rate()).sum();
    if total <= 0.0 {
        return pool[rng.random_range(0..pool.len())];
    }
    let mut target = rng.random::<f64>() * total;
    for candidate in pool {
        let rate = candidate.rate();
        if target < rate {
            return candidate;
        }
        target -= rate;
    }
    // Float residue: fall back to the last candidate with nonzero weight.
    pool.iter()
        .rev()
        .find(|c| c.rate() > 0.0)
        .expect("total > 0")
}

/// Child takes elements `[0, cut)` from `a` and `[cut, len)` from `b`.
pub fn crossover_at(a: &Genome, b: &Genome, cut: usize) -> Genome {
    let choices = a.choices()[..cut]
        .iter()
        .chain(&b.choices()[cut..])
        .copied()
        .collect();
    Genome::new(choices)
}

pub fn crossover<R: Rng + ?Sized>(
    a: &Genome,
    b: &Genome,
    kind: CrossoverKind,
    rng: &mut R,
) -> Genome {
    let len = a.len();
    match kind {
        CrossoverKind::SinglePoint => {
            if len < 2 {
                return a.clone();
            }
            let cut = rng.random_range(1..len);
            crossover_at(a, b, cut)
        }
        CrossoverKind::Uniform => {
            let choices = a
                .choices()
                .iter()
                .zip(b.choices())
                .map(|(&x, &y)| if rng.random::<bool>() { x } else { y })
                .collect();
            Genome::new(choices)
        }
    }
}

/// With probability `probability`, moves one uniformly chosen element to a
/// different, uniformly chosen value.
pub fn mutate<R: Rng + ?Sized>(
    space: &SearchSpace,
    genome: &Genome,
    probability: f64,
    rng: &mut R,
) -> Genome {
    if rng.random::<f64>() >= probability {
        return genome.clone();
    }
    let element = rng.random_range(0..space.element_count());
    let count = space.value_count(element);
    let current = genome.choice(element);
    // Draw from the count-1 other values by skipping over the current one.
    let mut value = rng.random_range(0..count - 1);
    if value >= current {
        value += 1;
    }
    genome.with_choice(element, value)
}

/// Produces `cfg.population_size` offspring from `parents`.
///
/// Offspring duplicating a genome in `live` (or an earlier sibling) are
/// re-drawn up to `cfg.duplicate_retries` times, then admitted anyway.
pub fn breed<R: Rng + ?Sized>(
    space: &SearchSpace,
    parents: &[&Candidate],
    live: &HashSet<Genome>,
    cfg: &EvolutionConfig,
    next_id: u64,
    birth_generation: u32,
    rng: &mut R,
) -> Vec<Candidate> {
    let mut taken: HashSet<Genome> = HashSet::new();
    let mut offspring = Vec::with_capacity(cfg.population_size);
    for i in 0..cfg.population_size {
        let mut child = None;
        for _ in 0..=cfg.duplicate_retries {
            let mother = select_parent(parents, rng);
            let father = select_parent(parents, rng);
            let genome = crossover(&mother.genome, &father.genome, cfg.crossover, rng);
            let genome = mutate(space, &genome, cfg.mutation_probability, rng);
            let duplicate = live.contains(&genome) || taken.contains(&genome);
            child = Some(genome);
            if !duplicate {
                break;
            }
        }
        let genome = child.expect("at least one attempt");
        taken.insert(genome.clone());
        offspring.push(Candidate::new(next_id + i as u64, genome, birth_generation));
    }
    offspring
}

/// Splits candidates into the top `n` by estimated rate and the rest.
///
/// Ties at the cut go to more impressions, then the lower id.
pub fn select_survivors<'a>(
    candidates: &[&'a Candidate],
    n: usize,
) -> (Vec<&'a Candidate>, Vec<&'a Candidate>) {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| stats::rank_order(a, b));
    let discarded = ranked.split_off(n.min(ranked.len()));
    (ranked, discarded)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingConfig {
    /// Total interactions after which the run ends.
    pub interaction_budget: Option<u64>,
    /// Stop once the best candidate is separated from control.
    pub stop_when_separated: bool,
    /// Extra condition for the separation rule: minimum improvement in percent.
    pub improvement_target_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Generations,
    Budget,
    Target,
    Manual,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Generations => "generations",
            StopReason::Budget => "budget",
            StopReason::Target => "target",
            StopReason::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

pub fn check_stopping(
    generation: u32,
    total_interactions: u64,
    best: Option<&Candidate>,
    control: Option<&Candidate>,
    evolution: &EvolutionConfig,
    stopping: &StoppingConfig,
) -> StopDecision {
    if generation >= evolution.max_generations {
        return StopDecision::Stop(StopReason::Generations);
    }
    if stopping
        .interaction_budget
        .is_some_and(|b| total_interactions >= b)
    {
        return StopDecision::Stop(StopReason::Budget);
    }
    if stopping.stop_when_separated {
        if let (Some(best), Some(control)) = (best, control) {
            let est = |c: &Candidate| {
                stats::estimate(c.conversions, c.impressions, 0.95, IntervalMethod::Wald).ok()
            };
            if let (Some(b), Some(c)) = (est(best), est(control)) {
                let target_met = match stopping.improvement_target_pct {
                    Some(target) => stats::improvement_over_control(b.rate, c.rate)
                        .is_ok_and(|imp| imp >= target),
                    None => true,
                };
                if b.ci_low > c.ci_high && target_met {
                    return StopDecision::Stop(StopReason::Target);
                }
            }
        }
    }
    StopDecision::Continue
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn g(c: &[u16]) -> Genome {
        Genome::new(c.to_vec())
    }

    fn scored(id: u64, conversions: u64, impressions: u64) -> Candidate {
        let mut c = Candidate::new(id, g(&[id as u16 % 2, 1]), 0);
        c.conversions = conversions;
        c.impressions = impressions;
        c
    }

    #[test]
    fn initial_population_is_control_plus_neighbors() {
        let space = SearchSpace::from_counts(&[3, 3, 2]).unwrap();
        let pop = initialize_population(&space, &EvolutionConfig::default(), &mut rng(1));
        assert_eq!(pop.len(), 6);
        assert!(pop[0].is_control() && pop[0].genome.is_control());
        assert!(pop[1..]
            .iter()
            .all(|c| c.genome.hamming(&space.control()) == 1 && c.is_active()));

        let tiny = SearchSpace::from_counts(&[2]).unwrap();
        assert_eq!(
            initialize_population(&tiny, &EvolutionConfig::default(), &mut rng(1)).len(),
            2
        );
    }

    #[test]
    fn initial_population_samples_when_capped() {
        let space = SearchSpace::from_counts(&[9, 9, 9, 9]).unwrap();
        let cfg = EvolutionConfig {
            initial_population_cap: 10,
            ..Default::default()
        };
        let a = initialize_population(&space, &cfg, &mut rng(3));
        let b = initialize_population(&space, &cfg, &mut rng(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let distinct: HashSet<_> = a.iter().map(|c| c.genome.clone()).collect();
        assert_eq!(distinct.len(), 10);
        assert!(a[1..]
            .iter()
            .all(|c| c.genome.hamming(&space.control()) == 1));
    }

    #[test]
    fn selection_single_and_zero_rates() {
        let only = scored(1, 3, 10);
        for s in 0..20 {
            assert_eq!(select_parent(&[&only], &mut rng(s)).id, 1);
        }
        let a = scored(1, 0, 10);
        let b = scored(2, 0, 10);
        let mut hits = [0u32; 2];
        let mut r = rng(9);
        for _ in 0..10_000 {
            hits[(select_parent(&[&a, &b], &mut r).id - 1) as usize] += 1;
        }
        assert!((hits[0] as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn selection_frequency_matches_rate_ratio() {
        // Rates 0.02 and 0.06 select with probabilities 0.25 and 0.75.
        let a = scored(1, 40, 2000);
        let b = scored(2, 120, 2000);
        let mut r = rng(2024);
        let draws = 100_000;
        let picked_b = (0..draws)
            .filter(|_| select_parent(&[&a, &b], &mut r).id == 2)
            .count();
        let freq = picked_b as f64 / draws as f64;
        assert!((freq - 0.75).abs() <= 0.01, "freq {freq}");
    }

    #[test]
    fn equal_rates_select_uniformly() {
        let pool: Vec<Candidate> = (0..4).map(|i| scored(i, 7, 100)).collect();
        let refs: Vec<&Candidate> = pool.iter().collect();
        let mut r = rng(5);
        let mut hits = [0u32; 4];
        for _ in 0..40_000 {
            hits[select_parent(&refs, &mut r).id as usize] += 1;
        }
        assert!(hits
            .iter()
            .all(|&h| (h as f64 / 40_000.0 - 0.25).abs() < 0.015));
    }

    #[test]
    fn crossover_examples() {
        let a = g(&[0, 0, 0, 0]);
        let b = g(&[1, 1, 1, 1]);
        assert_eq!(crossover_at(&a, &b, 2), g(&[0, 0, 1, 1]));
        for cut in 1..4 {
            assert_eq!(crossover_at(&a, &a, cut), a);
        }
        let one = g(&[2]);
        assert_eq!(
            crossover(&one, &g(&[1]), CrossoverKind::SinglePoint, &mut rng(0)),
            one
        );
    }

    #[test]
    fn crossover_children_take_parent_values_at_every_cut() {
        let a = g(&[0, 1, 2, 0, 1]);
        let b = g(&[1, 2, 0, 2, 0]);
        for cut in 1..5 {
            let child = crossover_at(&a, &b, cut);
            for i in 0..5 {
                assert!(child.choice(i) == a.choice(i) || child.choice(i) == b.choice(i));
                let expected = if i < cut { a.choice(i) } else { b.choice(i) };
                assert_eq!(child.choice(i), expected);
            }
        }
        let mut r = rng(11);
        for _ in 0..200 {
            let child = crossover(&a, &b, CrossoverKind::Uniform, &mut r);
            assert!(
                (0..5).all(|i| child.choice(i) == a.choice(i) || child.choice(i) == b.choice(i))
            );
        }
    }

    #[test]
    fn mutation_probability_bounds() {
        let space = SearchSpace::from_counts(&[2, 2]).unwrap();
        let genome = g(&[1, 0]);
        for seed in 0..500 {
            assert_eq!(mutate(&space, &genome, 0.0, &mut rng(seed)), genome);
            let m = mutate(&space, &genome, 1.0, &mut rng(seed));
            assert_eq!(m.hamming(&genome), 1);
            assert!(space.validate(&m).is_ok());
        }
    }

    #[test]
    fn mutation_outcome_distribution() {
        // counts [2,3] from [0,0]: element 0 w.p. 1/2 -> [1,0];
        // element 1 w.p. 1/2 then value 1 or 2 w.p. 1/2 each -> 1/4 apiece.
        let space = SearchSpace::from_counts(&[2, 3]).unwrap();
        let start = g(&[0, 0]);
        let mut r = rng(77);
        let draws = 100_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            *counts
                .entry(mutate(&space, &start, 1.0, &mut r))
                .or_insert(0u32) += 1;
        }
        for (outcome, p) in [(g(&[1, 0]), 0.5), (g(&[0, 1]), 0.25), (g(&[0, 2]), 0.25)] {
            let freq = counts[&outcome] as f64 / draws as f64;
            assert!((freq - p).abs() <= 0.01, "{outcome}: {freq}");
        }
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn breed_produces_n_valid_offspring_with_fresh_ids() {
        let space = SearchSpace::from_counts(&[3, 4, 2, 5]).unwrap();
        let cfg = EvolutionConfig {
            population_size: 8,
            ..Default::default()
        };
        let mut r = rng(8);
        let mut pop = initialize_population(&space, &cfg, &mut r);
        for (i, c) in pop.iter_mut().enumerate() {
            c.impressions = 100;
            c.conversions = i as u64 % 7;
        }
        let parents: Vec<&Candidate> = pop[1..].iter().collect();
        let live: HashSet<Genome> = pop.iter().map(|c| c.genome.clone()).collect();
        let kids = breed(&space, &parents, &live, &cfg, 100, 1, &mut r);
        assert_eq!(kids.len(), 8);
        let ids: HashSet<u64> = kids.iter().map(|k| k.id).collect();
        assert_eq!(ids, (100..108).collect());
        for k in &kids {
            assert!(space.validate(&k.genome).is_ok());
            assert_eq!(
                (k.impressions, k.conversions, k.birth_generation),
                (0, 0, 1)
            );
            assert!(k.is_active());
        }
    }

    #[test]
    fn breed_closure_without_mutation() {
        let space = SearchSpace::from_counts(&[3, 3, 3]).unwrap();
        let cfg = EvolutionConfig {
            population_size: 4,
            mutation_probability: 0.0,
            ..Default::default()
        };
        let mut parent = Candidate::new(5, g(&[2, 1, 2]), 0);
        parent.impressions = 10;
        parent.conversions = 1;
        let live = HashSet::from([parent.genome.clone()]);
        let kids = breed(&space, &[&parent], &live, &cfg, 6, 1, &mut rng(0));
        assert!(kids.iter().all(|k| k.genome == parent.genome));
    }

    #[test]
    fn survivors_break_ties_by_impressions_then_id() {
        let a = scored(4, 10, 100);
        let b = scored(2, 20, 200);
        let c = scored(3, 10, 100);
        let d = scored(1, 5, 100);
        let (kept, dropped) = select_survivors(&[&a, &b, &c, &d], 2);
        assert_eq!(kept.iter().map(|c| c.id).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(dropped.iter().map(|c| c.id).collect::<Vec<_>>(), vec![4, 1]);
    }

    #[test]
    fn stopping_rules() {
        let evo = EvolutionConfig {
            max_generations: 4,
            ..Default::default()
        };
        let none = StoppingConfig::default();
        assert_eq!(
            check_stopping(4, 0, None, None, &evo, &none),
            StopDecision::Stop(StopReason::Generations)
        );
        assert_eq!(
            check_stopping(1, 10, None, None, &evo, &none),
            StopDecision::Continue
        );
        let budget = StoppingConfig {
            interaction_budget: Some(599_008),
            ..Default::default()
        };
        assert_eq!(
            check_stopping(2, 599_008, None, None, &evo, &budget),
            StopDecision::Stop(StopReason::Budget)
        );
        assert_eq!(
            check_stopping(2, 599_007, None, None, &evo, &budget),
            StopDecision::Continue
        );

        let best = scored(1, 900, 10_000);
        let control = scored(0, 500, 10_000);
        let sep = StoppingConfig {
            stop_when_separated: true,
            improvement_target_pct: Some(50.0),
            ..Default::default()
        };
        assert_eq!(
            check_stopping(1, 0, Some(&best), Some(&control), &evo, &sep),
            StopDecision::Stop(StopReason::Target)
        );
        let far = StoppingConfig {
            improvement_target_pct: Some(100.0),
            ..sep
        };
        assert_eq!(
            check_stopping(1, 0, Some(&best), Some(&control), &evo, &far),
            StopDecision::Continue
        );
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = EvolutionConfig {
            population_size: 1,
            mutation_probability: 1.5,
            control_holdout_fraction: 1.0,
            ..Default::default()
        };
        let fields: Vec<String> = bad.validate().into_iter().map(|e| e.field).collect();
        assert_eq!(
            fields,
            vec![
                "evolution.population_size",
                "evolution.mutation_probability",
                "evolution.control_holdout_fraction"
            ]
        );
        assert!(EvolutionConfig::default().validate().is_empty());
    }
}
