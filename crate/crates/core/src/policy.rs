//! Genetic search over linear rules `d(x) = 1{eta . (1, x) >= 0}`.
//!
//! The genome holds the intercept and the first `p - 1` covariate
//! coefficients in `[-B, B]` plus a sign bit for the last coefficient, so
//! every candidate satisfies `|eta[p]| = 1` by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LinearRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("last coefficient must be nonzero to normalize a rule")]
    ZeroLastCoefficient,
    #[error("rule coefficients must be finite and at least two long")]
    InvalidCoefficients,
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
}

/// Divides `raw` by the magnitude of its last entry.
pub fn normalize_eta(raw: &[f64]) -> Result<LinearRule, PolicyError> {
    if raw.len() < 2 || raw.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::InvalidCoefficients);
    }
    let last = raw[raw.len() - 1].abs();
    if last == 0.0 {
        return Err(PolicyError::ZeroLastCoefficient);
    }
    Ok(LinearRule::from_normalized(raw.iter().map(|v| v / last).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    /// Initial mutation standard deviation; `None` means `0.1 * bound`.
    pub mutation_sd: Option<f64>,
    /// Multiplicative decay of the mutation scale per generation.
    pub mutation_decay: f64,
    /// Probability that each free gene of a child is mutated.
    pub mutation_rate: f64,
    /// Probability that a child's sign bit flips.
    pub sign_flip_rate: f64,
    pub crossover_rate: f64,
    pub bound: f64,
    pub elitism: usize,
    pub tournament_size: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            generations: 200,
            mutation_sd: None,
            mutation_decay: 0.99,
            mutation_rate: 0.5,
            sign_flip_rate: 0.05,
            crossover_rate: 0.8,
            bound: 100.0,
            elitism: 2,
            tournament_size: 3,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.population_size < 10 {
            return bad("population_size must be at least 10");
        }
        if self.generations < 1 {
            return bad("generations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad("crossover_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(0.0..=1.0).contains(&self.sign_flip_rate) {
            return bad("mutation and sign-flip rates must lie in [0, 1]");
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return bad("bound must be positive");
        }
        if let Some(sd) = self.mutation_sd {
            if !(sd > 0.0 && sd.is_finite()) {
                return bad("mutation_sd must be positive");
            }
        }
        if !(self.mutation_decay > 0.0 && self.mutation_decay <= 1.0) {
            return bad("mutation_decay must lie in (0, 1]");
        }
        if self.elitism >= self.population_size {
            return bad("elitism must be smaller than population_size");
        }
        if self.tournament_size < 1 {
            return bad("tournament_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best_rule: LinearRule,
    pub best_value: f64,
    /// Best value found up to and including each generation (the initial
    /// population is generation 0).
    pub history: Vec<f64>,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
struct Genome {
    genes: Vec<f64>,
    positive: bool,
}

impl Genome {
    fn rule(&self) -> LinearRule {
        let mut eta = self.genes.clone();
        eta.push(if self.positive { 1.0 } else { -1.0 });
        LinearRule::from_normalized(eta)
    }
}

fn fitness(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Maximizes `value` over rules for `p` covariates. Deterministic given
/// `config.seed`, independent of the thread count.
pub fn genetic_search<F>(value: F, p: usize, config: &GaConfig) -> Result<SearchResult, PolicyError>
where
    F: Fn(&LinearRule) -> f64 + Sync,
{
    config.validate()?;
    if p == 0 {
        return Err(PolicyError::InvalidConfig("rules need at least one covariate".into()));
    }
    let b = config.bound;
    let base_sd = config.mutation_sd.unwrap_or(0.1 * b);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let evaluate = |pop: &[Genome]| -> Vec<f64> {
        pop.par_iter().map(|g| fitness(value(&g.rule()))).collect()
    };

    // Log-uniform magnitudes in [1e-2 B, B] so that both steep and flat
    // boundaries are represented, plus the all-zero genome of each sign.
    let mut population: Vec<Genome> = (0..config.population_size)
        .map(|i| {
            if i < 2 {
                return Genome {
                    genes: vec![0.0; p],
                    positive: i == 0,
                };
            }
            let genes = (0..p)
                .map(|_| {
                    let mag = b * 10f64.powf(-2.0 * rng.random::<f64>());
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            Genome {
                genes,
                positive: rng.random::<bool>(),
            }
        })
        .collect();
    let mut scores = evaluate(&population);
    let mut evaluations = population.len();

    let argmax = |s: &[f64]| {
        s.iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > s[best] { i } else { best })
    };
    let mut best_idx = argmax(&scores);
    let mut best = (population[best_idx].clone(), scores[best_idx]);
    let mut history = vec![best.1];

    for generation in 0..config.generations {
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(a.cmp(&c)));
        let mut next: Vec<Genome> = order[..config.elitism]
            .iter()
            .map(|&i| population[i].clone())
            .collect();
        let elite_scores: Vec<f64> = order[..config.elitism].iter().map(|&i| scores[i]).collect();

        let sd = base_sd * config.mutation_decay.powi(generation as i32);
        let tournament = |rng: &mut ChaCha8Rng| {
            let mut winner = rng.random_range(0..population.len());
            for _ in 1..config.tournament_size {
                let c = rng.random_range(0..population.len());
                if scores[c] > scores[winner] {
                    winner = c;
                }
            }
            winner
        };
        let mut children = Vec::with_capacity(config.population_size - config.elitism);
        while next.len() + children.len() < config.population_size {
            let a = &population[tournament(&mut rng)];
            let c = &population[tournament(&mut rng)];
            let mut child = if rng.random::<f64>() < config.crossover_rate {
                Genome {
                    genes: a
                        .genes
                        .iter()
                        .zip(&c.genes)
                        .map(|(x, y)| if rng.random::<bool>() { *x } else { *y })
                        .collect(),
                    positive: if rng.random::<bool>() { a.positive } else { c.positive },
                }
            } else {
                a.clone()
            };
            // A log-uniform step-size multiplier mixes coarse exploration
            // with fine local refinement.
            let scale = sd * 10f64.powf(-3.0 * rng.random::<f64>());
            for g in &mut child.genes {
                if rng.random::<f64>() < config.mutation_rate {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *g = (*g + scale * z).clamp(-b, b);
                }
            }
            if rng.random::<f64>() < config.sign_flip_rate {
                child.positive = !child.positive;
            }
            children.push(child);
        }
        let child_scores = evaluate(&children);
        evaluations += children.len();
        next.extend(children);
        population = next;
        scores = elite_scores;
        scores.extend(child_scores);

        best_idx = argmax(&scores);
        if scores[best_idx] > best.1 {
            best = (population[best_idx].clone(), scores[best_idx]);
        }
        history.push(best.1);
    }
    Ok(SearchResult {
        best_rule: best.0.rule(),
        best_value: best.1,
        history,
        evaluations,
    })
}
