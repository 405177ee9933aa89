//! Simulation design with a finite target population, a biased source
//! sample and a simple random target sample, plus oracle metrics and
//! replicated studies.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::{make_folds, CrossFitted, DEFAULT_FOLDS};
use crate::data::{Arm, LinearRule, SourceRecord, SourceSample, TargetRecord, TargetSample};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorOptions, EvalGrid, ValueTable};
use crate::features::{MomentSpec, Term};
use crate::inference::{bootstrap_values, sample_sd, wald_ci};
use crate::pipeline::{fit_nuisances, ModelSpec, ProbabilitySpec, SurvivalSpec};
use crate::policy::{genetic_search, GaConfig};

/// Number of covariates in the design.
pub const DIM: usize = 3;

/// Covariates are truncated to `[-TRUNCATION, TRUNCATION]`.
pub const TRUNCATION: f64 = 4.0;

const CORRELATION_13: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    /// Finite target population size `N`.
    pub population_size: usize,
    /// Target sample size `m`.
    pub target_size: usize,
    /// Multiplier on the censoring hazard (0.04 gives about 20% censoring,
    /// 0.2 about 33%).
    pub censoring_scale: f64,
    /// RMST horizon `L`.
    pub horizon: f64,
    /// When false the source is a simple random sample of `source_size`
    /// from the population instead of a covariate-dependent one.
    pub covariate_shift: bool,
    pub source_size: Option<usize>,
    pub oracle_size: usize,
    pub oracle_seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            population_size: 200_000,
            target_size: 8000,
            censoring_scale: 0.04,
            horizon: 4.0,
            covariate_shift: true,
            source_size: None,
            oracle_size: 100_000,
            oracle_seed: 2023,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.target_size == 0 || self.target_size > self.population_size {
            return bad("target_size must lie in [1, population_size]");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if !(self.censoring_scale > 0.0 && self.censoring_scale.is_finite()) {
            return bad("censoring_scale must be positive");
        }
        if self.oracle_size == 0 {
            return bad("oracle_size must be positive");
        }
        if let Some(n) = self.source_size {
            if n == 0 || n > self.population_size {
                return bad("source_size must lie in [1, population_size]");
            }
        }
        Ok(())
    }
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `P(I_S = 1 | x)`.
pub fn sampling_score(x: &[f64]) -> f64 {
    expit(-4.5 - 0.5 * x[0] - 0.5 * x[1] - 0.4 * x[2])
}

/// `P(A = 1 | x)` within the source.
pub fn propensity(x: &[f64]) -> f64 {
    expit(0.5 + 0.8 * x[0] - 0.5 * x[1])
}

/// `c` in the event hazard `c * exp(t)`.
pub fn outcome_multiplier(arm: Arm, x: &[f64]) -> f64 {
    match arm {
        Arm::Control => (-2.5 - 1.5 * x[0] - x[1] - 0.7 * x[2]).exp(),
        Arm::Treated => (-1.0 - x[0] - 0.9 * x[1] - x[2] - 2.0 * x[1] * x[1] + x[0] * x[2]).exp(),
    }
}

/// `c` in the censoring hazard `c * exp(t)`.
pub fn censoring_multiplier(arm: Arm, x: &[f64], scale: f64) -> f64 {
    scale
        * match arm {
            Arm::Control => (-1.6 + 0.8 * x[0] - 1.1 * x[1] - 0.7 * x[2]).exp(),
            Arm::Treated => (-1.8 - 0.8 * x[0] - 1.7 * x[1] - 1.4 * x[2]).exp(),
        }
}

/// Survival function of the hazard `c * exp(t)`.
pub fn event_survival(c: f64, t: f64) -> f64 {
    (-c * t.exp_m1()).exp()
}

/// Time at which the cumulative hazard `c (e^t - 1)` reaches `e`.
pub fn event_time_for(c: f64, e: f64) -> f64 {
    (e / c).ln_1p()
}

/// Inverse-transform draw from the hazard `c * exp(t)`.
pub fn sample_event_time<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    event_time_for(c, Exp1.sample(rng))
}

/// Correlated normal covariates truncated by rejecting whole triples.
pub fn sample_covariates<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<[f64; DIM]> {
    let tail = (1.0 - CORRELATION_13 * CORRELATION_13).sqrt();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let z: [f64; DIM] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let x = [z[0], z[1], CORRELATION_13 * z[0] + tail * z[2]];
        if x.iter().all(|v| v.abs() <= TRUNCATION) {
            out.push(x);
        }
    }
    out
}

/// Covariates with both potential event times.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    x: Vec<[f64; DIM]>,
    times: Vec<[f64; 2]>,
}

impl OracleSample {
    pub fn generate(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_covariates(size, &mut rng);
        let times = x
            .iter()
            .map(|xi| Arm::BOTH.map(|a| sample_event_time(outcome_multiplier(a, xi), &mut rng)))
            .collect();
        Self { x, times }
    }

    /// Builds an oracle from given covariates and `[T(0), T(1)]` pairs.
    pub fn from_parts(x: Vec<[f64; DIM]>, times: Vec<[f64; 2]>) -> Result<Self> {
        if x.len() != times.len() || x.is_empty() {
            return Err(Error::Config("oracle covariates and times must match and be nonempty".into()));
        }
        Ok(Self { x, times })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn covariates(&self) -> &[[f64; DIM]] {
        &self.x
    }

    pub fn potential_times(&self) -> &[[f64; 2]] {
        &self.times
    }
}

/// Mean of `min(T(d(X)), L)` over the oracle sample.
pub fn true_value(rule: &LinearRule, oracle: &OracleSample, horizon: f64) -> f64 {
    let total: f64 = oracle
        .x
        .iter()
        .zip(&oracle.times)
        .map(|(x, t)| t[rule.decide(x).index()].min(horizon))
        .sum();
    total / oracle.len() as f64
}

/// Fraction of oracle subjects on which `rule` and `optimal` agree.
pub fn pcd(rule: &LinearRule, optimal: &LinearRule, oracle: &OracleSample) -> f64 {
    let agree = oracle
        .x
        .iter()
        .filter(|x| rule.decide(&x[..]) == optimal.decide(&x[..]))
        .count();
    agree as f64 / oracle.len() as f64
}

/// Search budget for the oracle-optimal rule.
pub fn oracle_ga(seed: u64) -> GaConfig {
    GaConfig {
        population_size: 200,
        generations: 150,
        seed,
        ..GaConfig::default()
    }
}

/// Oracle sample with its optimal rule, computed once per design.
#[derive(Debug, Clone)]
pub struct StudyOracle {
    pub sample: OracleSample,
    pub optimal_rule: LinearRule,
    pub optimal_value: f64,
    pub horizon: f64,
}

impl StudyOracle {
    pub fn build(dgp: &DgpConfig, ga: &GaConfig) -> Result<Self> {
        dgp.validate()?;
        let sample = OracleSample::generate(dgp.oracle_size, dgp.oracle_seed);
        let found = genetic_search(|r| true_value(r, &sample, dgp.horizon), DIM, ga)?;
        Ok(Self {
            sample,
            optimal_rule: found.best_rule,
            optimal_value: found.best_value,
            horizon: dgp.horizon,
        })
    }

    pub fn true_value(&self, rule: &LinearRule) -> f64 {
        true_value(rule, &self.sample, self.horizon)
    }

    pub fn pcd(&self, rule: &LinearRule) -> f64 {
        pcd(rule, &self.optimal_rule, &self.sample)
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub source: SourceSample,
    pub target: TargetSample,
}

/// Draws the population, the source and target samples and the observed
/// source outcomes.
pub fn generate_replicate(config: &DgpConfig, seed: u64) -> Result<Replicate> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let population = sample_covariates(config.population_size, &mut rng);
    let mut members: Vec<usize> = match (config.covariate_shift, config.source_size) {
        (true, _) => (0..population.len())
            .filter(|&i| rng.random::<f64>() < sampling_score(&population[i]))
            .collect(),
        (false, n) => index::sample(&mut rng, population.len(), n.unwrap_or(config.target_size)).into_vec(),
    };
    members.sort_unstable();
    let mut target_idx = index::sample(&mut rng, population.len(), config.target_size).into_vec();
    target_idx.sort_unstable();

    let source = members
        .iter()
        .map(|&i| {
            let x = population[i];
            let arm = Arm::from_indicator(rng.random::<f64>() < propensity(&x));
            let t = sample_event_time(outcome_multiplier(arm, &x), &mut rng);
            let c = sample_event_time(censoring_multiplier(arm, &x, config.censoring_scale), &mut rng);
            SourceRecord {
                x: x.to_vec(),
                arm,
                time: t.min(c),
                event: t <= c,
            }
        })
        .collect();
    let weight = config.population_size as f64 / config.target_size as f64;
    let target = target_idx
        .iter()
        .map(|&i| TargetRecord {
            x: population[i].to_vec(),
            design_weight: weight,
        })
        .collect();
    Ok(Replicate {
        source: SourceSample::new(source)?,
        target: TargetSample::new(target)?,
    })
}

/// Which working models are correctly specified. The sampling score,
/// propensity and censoring models are switched together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub outcome_correct: bool,
    pub scores_correct: bool,
}

impl ScenarioSpec {
    pub const ALL: [ScenarioSpec; 4] = [
        ScenarioSpec::new(true, true),
        ScenarioSpec::new(true, false),
        ScenarioSpec::new(false, true),
        ScenarioSpec::new(false, false),
    ];

    pub const fn new(outcome_correct: bool, scores_correct: bool) -> Self {
        Self {
            outcome_correct,
            scores_correct,
        }
    }

    /// Short code: `tttt`, `tw`, `wt` or `ww`.
    pub fn code(&self) -> &'static str {
        match (self.outcome_correct, self.scores_correct) {
            (true, true) => "tttt",
            (true, false) => "tw",
            (false, true) => "wt",
            (false, false) => "ww",
        }
    }

    /// Label of the form `O:T / S:W, A:W, C:W`.
    pub fn label(&self) -> String {
        let c = |ok: bool| if ok { 'T' } else { 'W' };
        let s = c(self.scores_correct);
        format!("O:{} / S:{s}, A:{s}, C:{s}", c(self.outcome_correct))
    }

    /// Working models for the parametric pathway.
    pub fn model_spec(&self) -> ModelSpec {
        let linear: Vec<Term> = (0..DIM).map(Term::Linear).collect();
        let exps: Vec<Term> = (0..DIM).map(Term::Exp).collect();
        let mut treated = linear.clone();
        treated.extend([Term::Square(1), Term::Product(0, 2)]);
        let outcome = if self.outcome_correct {
            SurvivalSpec::Cox {
                features: Some(linear.clone()),
                treated_features: Some(treated),
            }
        } else {
            SurvivalSpec::cox(Some(exps.clone()))
        };
        if self.scores_correct {
            ModelSpec {
                propensity: Some(ProbabilitySpec::logistic(Some(linear.clone()))),
                sampling_score: Some(ProbabilitySpec::logistic(Some(linear.clone()))),
                calibration: Some(MomentSpec::first()),
                outcome: Some(outcome),
                censoring: Some(SurvivalSpec::cox(Some(linear))),
            }
        } else {
            ModelSpec {
                propensity: Some(ProbabilitySpec::logistic(Some(vec![Term::Exp(2)]))),
                sampling_score: Some(ProbabilitySpec::logistic(Some(vec![Term::Exp(0)]))),
                calibration: Some(MomentSpec::transforms_only(vec![Term::Exp(0)])),
                outcome: Some(outcome),
                censoring: Some(SurvivalSpec::cox(Some(exps))),
            }
        }
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ScenarioSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "tttt" | "tt" => ScenarioSpec::new(true, true),
            "tw" | "twww" => ScenarioSpec::new(true, false),
            "wt" | "wttt" => ScenarioSpec::new(false, true),
            "ww" | "wwww" => ScenarioSpec::new(false, false),
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario `{other}` (expected tttt, tw, wt or ww)"
                )))
            }
        })
    }
}

/// How nuisances are fit and standard errors obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pathway {
    /// Full-sample working models; bootstrap standard errors when
    /// `bootstrap >= 2`.
    Parametric { bootstrap: usize },
    /// Cross-fitted nuisances with influence-function standard errors.
    CrossFit { folds: usize },
}

impl Default for Pathway {
    fn default() -> Self {
        Pathway::Parametric { bootstrap: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub scenario: ScenarioSpec,
    pub estimators: Vec<EstimatorKind>,
    pub replications: usize,
    pub seed: u64,
    pub ga: GaConfig,
    pub pathway: Pathway,
    pub level: f64,
    pub options: EstimatorOptions,
    /// Overrides the scenario's working models (or the kernel learners of
    /// the cross-fitted pathway).
    pub models: Option<ModelSpec>,
    /// Evaluates this rule instead of searching.
    pub fixed_rule: Option<Vec<f64>>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            scenario: ScenarioSpec::new(true, true),
            estimators: EstimatorKind::REPORTED.to_vec(),
            replications: 100,
            seed: 1,
            ga: GaConfig::default(),
            pathway: Pathway::default(),
            level: 0.95,
            options: EstimatorOptions::default(),
            models: None,
            fixed_rule: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.ga.validate()?;
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("level must lie in (0, 1)".into()));
        }
        if let Some(eta) = &self.fixed_rule {
            LinearRule::new(eta.clone())?;
            if eta.len() != DIM + 1 {
                return Err(Error::Config(format!("fixed_rule needs {} coefficients", DIM + 1)));
            }
        }
        match self.pathway {
            Pathway::Parametric { bootstrap: 1 } => {
                Err(Error::Config("bootstrap needs 0 or at least 2 replicates".into()))
            }
            Pathway::CrossFit { folds } if folds < 2 => Err(Error::Config("folds must be at least 2".into())),
            _ => Ok(()),
        }
    }

    /// Working models in use, restricted to the requested estimators.
    pub fn model_spec(&self) -> ModelSpec {
        let spec = match (&self.models, &self.pathway) {
            (Some(m), _) => m.clone(),
            (None, Pathway::Parametric { .. }) => self.scenario.model_spec(),
            (None, Pathway::CrossFit { .. }) => {
                let mut m = ModelSpec::kernel();
                if self.estimators.iter().any(|k| k.needs_sampling_score()) {
                    m.sampling_score = Some(ProbabilitySpec::kernel());
                }
                m
            }
        };
        spec.restricted_to(&self.estimators)
    }

    /// Cross-fitted configuration matching the flexible-learner study.
    pub fn crossfit() -> Self {
        Self {
            dgp: DgpConfig {
                censoring_scale: 0.2,
                ..DgpConfig::default()
            },
            estimators: vec![EstimatorKind::Acw],
            pathway: Pathway::CrossFit { folds: DEFAULT_FOLDS },
            ..Self::default()
        }
    }
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: EstimatorKind,
    pub source_size: usize,
    pub estimate: f64,
    /// `NaN` when no standard error is available.
    pub std_error: f64,
    pub ci: (f64, f64),
    pub true_value: f64,
    pub pcd: f64,
    /// Oracle-optimal value minus the true value of the chosen rule.
    pub regret: f64,
    pub eta: Vec<f64>,
    pub bootstrap_dropped: usize,
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, estimator: EstimatorKind, source_size: usize, error: &Error) -> Self {
        Self {
            replicate,
            estimator,
            source_size,
            estimate: f64::NAN,
            std_error: f64::NAN,
            ci: (f64::NAN, f64::NAN),
            true_value: f64::NAN,
            pcd: f64::NAN,
            regret: f64::NAN,
            eta: Vec::new(),
            bootstrap_dropped: 0,
            error: Some(error.to_string()),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn covers(&self) -> Option<bool> {
        self.std_error.is_finite().then_some(self.ci.0 <= self.true_value && self.true_value <= self.ci.1)
    }
}

/// Bias, SD, mean SE and coverage of one estimator across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: EstimatorKind,
    pub bias: f64,
    pub sd: f64,
    /// Mean standard error (`NaN` if none were computed).
    pub se: f64,
    /// Coverage in percent (`NaN` if no intervals were computed).
    pub cp: f64,
    pub true_value: f64,
    pub pcd: f64,
    pub regret: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyTable {
    pub scenario: String,
    pub optimal_value: f64,
    pub optimal_rule: Vec<f64>,
    pub mean_source_size: f64,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ReplicateRecord>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Summarizes replicate records per estimator, in order of first appearance.
pub fn summarize(records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let mut kinds: Vec<EstimatorKind> = Vec::new();
    for r in records {
        if !kinds.contains(&r.estimator) {
            kinds.push(r.estimator);
        }
    }
    kinds
        .into_iter()
        .map(|kind| {
            let all: Vec<&ReplicateRecord> = records.iter().filter(|r| r.estimator == kind).collect();
            let ok: Vec<&ReplicateRecord> = all.iter().copied().filter(|r| r.ok()).collect();
            let estimates: Vec<f64> = ok.iter().map(|r| r.estimate).collect();
            let covers: Vec<bool> = ok.iter().filter_map(|r| r.covers()).collect();
            SummaryRow {
                estimator: kind,
                bias: mean(ok.iter().map(|r| r.estimate - r.true_value)),
                sd: if estimates.len() >= 2 { sample_sd(&estimates) } else { f64::NAN },
                se: mean(ok.iter().map(|r| r.std_error).filter(|v| v.is_finite())),
                cp: 100.0 * mean(covers.iter().map(|&c| if c { 1.0 } else { 0.0 })),
                true_value: mean(ok.iter().map(|r| r.true_value)),
                pcd: mean(ok.iter().map(|r| r.pcd)),
                regret: mean(ok.iter().map(|r| r.regret)),
                replicates: ok.len(),
                failures: all.len() - ok.len(),
            }
        })
        .collect()
}

struct ReplicateSeeds {
    data: u64,
    search: u64,
    bootstrap: u64,
    folds: u64,
}

fn replicate_seeds(master: u64, replicate: usize) -> ReplicateSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(replicate as u64);
    ReplicateSeeds {
        data: rng.next_u64(),
        search: rng.next_u64(),
        bootstrap: rng.next_u64(),
        folds: rng.next_u64(),
    }
}

struct Fitted {
    kind: EstimatorKind,
    rule: LinearRule,
    estimate: f64,
    std_error: f64,
}

fn choose_rule(
    config: &StudyConfig,
    kind_index: usize,
    seed: u64,
    value: impl Fn(&LinearRule) -> f64 + Sync,
) -> Result<LinearRule> {
    if let Some(eta) = &config.fixed_rule {
        return Ok(LinearRule::new(eta.clone())?);
    }
    let ga = GaConfig {
        seed: seed.wrapping_add(kind_index as u64),
        ..config.ga.clone()
    };
    Ok(genetic_search(value, DIM, &ga)?.best_rule)
}

fn run_parametric(
    config: &StudyConfig,
    spec: &ModelSpec,
    data: &Replicate,
    seeds: &ReplicateSeeds,
    bootstrap: usize,
) -> Vec<Result<Fitted>> {
    let horizon = config.dgp.horizon;
    let table = (|| -> Result<ValueTable> {
        let nuisances = fit_nuisances(&data.source, &data.target, spec)?;
        let grid = EvalGrid::rmst(horizon, &data.source);
        Ok(ValueTable::build(
            &data.source,
            &data.target,
            &nuisances,
            &grid,
            &config.options,
            None,
        )?)
    })();
    let table = match table {
        Ok(t) => t,
        Err(e) => return config.estimators.iter().map(|_| Err(e.clone())).collect(),
    };
    let mut fitted: Vec<Result<Fitted>> = config
        .estimators
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let rule = choose_rule(config, i, seeds.search, |r| table.estimate(kind, r).unwrap_or(f64::NAN))?;
            let estimate = table.estimate(kind, &rule)?;
            Ok(Fitted {
                kind,
                rule,
                estimate,
                std_error: f64::NAN,
            })
        })
        .collect();
    if bootstrap >= 2 {
        let active: Vec<(usize, EstimatorKind, LinearRule)> = fitted
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().ok().map(|f| (i, f.kind, f.rule.clone())))
            .collect();
        if active.is_empty() {
            return fitted;
        }
        let rules: Vec<LinearRule> = active.iter().map(|a| a.2.clone()).collect();
        let statistics = |s: &SourceSample, t: &TargetSample| -> Result<Vec<f64>> {
            let nuisances = fit_nuisances(s, t, spec)?;
            let grid = EvalGrid::rmst(horizon, s);
            let table = ValueTable::build_for_rules(s, t, &nuisances, &grid, &config.options, &rules)?;
            active
                .iter()
                .map(|(_, kind, rule)| Ok(table.estimate(*kind, rule)?))
                .collect()
        };
        match bootstrap_values(
            &data.source,
            &data.target,
            statistics,
            bootstrap,
            config.level,
            seeds.bootstrap,
        ) {
            Ok(results) => {
                for ((i, _, _), b) in active.iter().zip(results) {
                    if let Ok(f) = &mut fitted[*i] {
                        f.std_error = b.std_error;
                    }
                }
            }
            Err(e) => {
                let e = Error::from(e);
                for (i, _, _) in &active {
                    fitted[*i] = Err(e.clone());
                }
            }
        }
    }
    fitted
}

fn run_crossfit(
    config: &StudyConfig,
    spec: &ModelSpec,
    data: &Replicate,
    seeds: &ReplicateSeeds,
    folds: usize,
) -> Vec<Result<Fitted>> {
    let cf = (|| -> Result<CrossFitted> {
        let assignment = make_folds(data.source.len(), data.target.len(), folds, seeds.folds)?;
        let grid = EvalGrid::rmst(config.dgp.horizon, &data.source);
        CrossFitted::fit(&data.source, &data.target, &assignment, spec, &grid, &config.options)
    })();
    let cf = match cf {
        Ok(c) => c,
        Err(e) => return config.estimators.iter().map(|_| Err(e.clone())).collect(),
    };
    config
        .estimators
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let rule = choose_rule(config, i, seeds.search, |r| cf.value(kind, r).unwrap_or(f64::NAN))?;
            let (estimate, std_error) = if matches!(kind, EstimatorKind::Acw | EstimatorKind::DrSource) {
                let v = cf.value_with_eif(kind, &rule)?;
                (v.estimate, v.eif_variance()?.1)
            } else {
                (cf.value(kind, &rule)?, f64::NAN)
            };
            Ok(Fitted {
                kind,
                rule,
                estimate,
                std_error,
            })
        })
        .collect()
}

/// Runs one replicate and returns one record per requested estimator.
pub fn run_replicate(config: &StudyConfig, oracle: &StudyOracle, replicate: usize) -> Vec<ReplicateRecord> {
    let seeds = replicate_seeds(config.seed, replicate);
    let data = match generate_replicate(&config.dgp, seeds.data) {
        Ok(d) => d,
        Err(e) => {
            return config
                .estimators
                .iter()
                .map(|&k| ReplicateRecord::failed(replicate, k, 0, &e))
                .collect()
        }
    };
    let spec = config.model_spec();
    let fitted = match config.pathway {
        Pathway::Parametric { bootstrap } => run_parametric(config, &spec, &data, &seeds, bootstrap),
        Pathway::CrossFit { folds } => run_crossfit(config, &spec, &data, &seeds, folds),
    };
    let n = data.source.len();
    config
        .estimators
        .iter()
        .zip(fitted)
        .map(|(&kind, f)| match f {
            Err(e) => ReplicateRecord::failed(replicate, kind, n, &e),
            Ok(f) => {
                let truth = oracle.true_value(&f.rule);
                let ci = if f.std_error.is_finite() {
                    wald_ci(f.estimate, f.std_error, config.level)
                } else {
                    (f64::NAN, f64::NAN)
                };
                ReplicateRecord {
                    replicate,
                    estimator: kind,
                    source_size: n,
                    estimate: f.estimate,
                    std_error: f.std_error,
                    ci,
                    true_value: truth,
                    pcd: oracle.pcd(&f.rule),
                    regret: oracle.optimal_value - truth,
                    eta: f.rule.eta().to_vec(),
                    bootstrap_dropped: 0,
                    error: None,
                }
            }
        })
        .collect()
}

/// Runs all replicates (in parallel, results in replicate order).
pub fn run_study(config: &StudyConfig, oracle: &StudyOracle) -> Result<StudyTable> {
    config.validate()?;
    let records: Vec<ReplicateRecord> = (0..config.replications)
        .into_par_iter()
        .flat_map_iter(|r| run_replicate(config, oracle, r))
        .collect();
    let mut sizes: Vec<(usize, usize)> = records.iter().map(|r| (r.replicate, r.source_size)).collect();
    sizes.dedup();
    Ok(StudyTable {
        scenario: config.scenario.label(),
        optimal_value: oracle.optimal_value,
        optimal_rule: oracle.optimal_rule.eta().to_vec(),
        mean_source_size: mean(sizes.iter().map(|s| s.1 as f64)),
        rows: summarize(&records),
        records,
    })
}

fn io_error(e: impl fmt::Display) -> Error {
    Error::Io {
        path: String::new(),
        message: e.to_string(),
    }
}

impl StudyTable {
    pub fn row(&self, kind: EstimatorKind) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == kind)
    }

    /// Summary CSV: one row per estimator.
    pub fn write_summary<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "scenario",
            "estimator",
            "bias",
            "sd",
            "se",
            "cp",
            "true_value",
            "pcd",
            "regret",
            "replicates",
            "failures",
        ])
        .map_err(io_error)?;
        for r in &self.rows {
            w.write_record([
                self.scenario.clone(),
                r.estimator.to_string(),
                r.bias.to_string(),
                r.sd.to_string(),
                r.se.to_string(),
                r.cp.to_string(),
                r.true_value.to_string(),
                r.pcd.to_string(),
                r.regret.to_string(),
                r.replicates.to_string(),
                r.failures.to_string(),
            ])
            .map_err(io_error)?;
        }
        w.flush().map_err(io_error)
    }

    /// Per-replicate CSV for plotting.
    pub fn write_replicates<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "replicate",
            "estimator",
            "source_size",
            "estimate",
            "std_error",
            "ci_lower",
            "ci_upper",
            "true_value",
            "pcd",
            "regret",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..=DIM).map(|j| format!("eta{j}")));
        header.push("error".into());
        w.write_record(&header).map_err(io_error)?;
        for r in &self.records {
            let mut row = vec![
                r.replicate.to_string(),
                r.estimator.to_string(),
                r.source_size.to_string(),
                r.estimate.to_string(),
                r.std_error.to_string(),
                r.ci.0.to_string(),
                r.ci.1.to_string(),
                r.true_value.to_string(),
                r.pcd.to_string(),
                r.regret.to_string(),
            ];
            row.extend((0..=DIM).map(|j| r.eta.get(j).map_or(String::new(), |v| v.to_string())));
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row).map_err(io_error)?;
        }
        w.flush().map_err(io_error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_time_inverse() {
        assert_eq!(event_time_for(1.0, 0.0), 0.0);
        let median = event_time_for(1.0, std::f64::consts::LN_2);
        assert!((median - 0.5266).abs() < 1e-4);
        assert!((event_survival(1.0, median) - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draws: Vec<f64> = (0..20001).map(|_| sample_event_time(1.0, &mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        assert!((draws[10000] - median).abs() < 0.02);
    }

    #[test]
    fn event_times_pass_ks() {
        let c = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draws: Vec<f64> = (0..10_000).map(|_| sample_event_time(c, &mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = 1.0 - event_survival(c, t);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic critical value at alpha = 0.01.
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
    }

    #[test]
    fn covariate_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sample_covariates(100_000, &mut rng);
        assert!(x.iter().flatten().all(|v| v.abs() <= TRUNCATION));
        let n = x.len() as f64;
        let m: Vec<f64> = (0..DIM).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        assert!(m.iter().all(|v| v.abs() < 0.02), "{m:?}");
        let cov = |a: usize, b: usize| x.iter().map(|r| (r[a] - m[a]) * (r[b] - m[b])).sum::<f64>() / n;
        let corr13 = cov(0, 2) / (cov(0, 0) * cov(2, 2)).sqrt();
        assert!((corr13 - 0.2).abs() < 0.02, "{corr13}");
        assert!(cov(0, 1).abs() < 0.02);
    }

    #[test]
    fn replicate_shape() {
        let rep = generate_replicate(&DgpConfig::default(), 4).unwrap();
        let n = rep.source.len();
        assert!((2500..=3600).contains(&n), "n = {n}");
        assert_eq!(rep.target.len(), 8000);
        assert!((rep.target.total_weight() - 200_000.0).abs() < 1e-6);
        let censored = rep.source.records().iter().filter(|r| !r.event).count() as f64 / n as f64;
        assert!((censored - 0.2).abs() <= 0.04, "censoring rate {censored}");

        let ml = DgpConfig {
            censoring_scale: 0.2,
            ..DgpConfig::default()
        };
        let rep = generate_replicate(&ml, 5).unwrap();
        let censored =
            rep.source.records().iter().filter(|r| !r.event).count() as f64 / rep.source.len() as f64;
        assert!((censored - 0.33).abs() <= 0.05, "censoring rate {censored}");
    }

    #[test]
    fn oracle_formulas() {
        let x = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.5, 2.0, 0.0]];
        let t = vec![[1.0, 5.0], [2.0, 3.0], [6.0, 0.5]];
        let o = OracleSample::from_parts(x, t).unwrap();
        let treat = LinearRule::constant(DIM, true, 1.0);
        let control = LinearRule::constant(DIM, false, 1.0);
        assert!((true_value(&treat, &o, 4.0) - (4.0 + 3.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((true_value(&control, &o, 1e6) - 3.0).abs() < 1e-15);
        let by_x3 = LinearRule::new(vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pcd(&by_x3, &by_x3, &o), 1.0);
        assert_eq!(pcd(&treat, &control, &o), 0.0);
    }

    #[test]
    fn scenario_codes() {
        for s in ScenarioSpec::ALL {
            assert_eq!(s.code().parse::<ScenarioSpec>().unwrap(), s);
        }
        assert_eq!("wwww".parse::<ScenarioSpec>().unwrap(), ScenarioSpec::new(false, false));
        assert!("tx".parse::<ScenarioSpec>().is_err());
        assert_eq!(ScenarioSpec::new(true, false).label(), "O:T / S:W, A:W, C:W");
    }
}
