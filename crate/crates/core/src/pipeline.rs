//! Declarative nuisance-model specifications and full-sample fitting.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::{solve_calibration, target_moments};
use crate::data::{LinearRule, SourceSample, TargetSample};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorOptions, EvalGrid, Functional, NuisanceSet, ValueTable};
use crate::features::{FeatureMap, MomentSpec, Term};
use crate::policy::{genetic_search, GaConfig, SearchResult};
use crate::nuisance::{
    fit_kernel_logistic, fit_kernel_survival, DEFAULT_MIN_NEIGHBOURS, fit_logistic, CoxSurvival, EventSource, ProbabilityModel,
};

/// Learner for a probability (propensity or sampling score).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbabilitySpec {
    /// Logistic regression on `features` (all covariates when absent).
    Logistic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<Vec<Term>>,
    },
    /// Nadaraya-Watson smoother. `min_neighbours` defaults to
    /// [`DEFAULT_MIN_NEIGHBOURS`]; 0 turns the floor off.
    Kernel {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidth: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_neighbours: Option<usize>,
    },
}

impl ProbabilitySpec {
    pub fn logistic(features: Option<Vec<Term>>) -> Self {
        ProbabilitySpec::Logistic { features }
    }

    /// Kernel smoother with default bandwidth and neighbourhood floor.
    pub fn kernel() -> Self {
        ProbabilitySpec::Kernel {
            bandwidth: None,
            min_neighbours: None,
        }
    }
}

/// Learner for a conditional survival function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurvivalSpec {
    /// Arm-specific Cox models. `features` applies to both arms unless
    /// `treated_features` overrides the treated arm.
    Cox {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<Vec<Term>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        treated_features: Option<Vec<Term>>,
    },
    /// Beran conditional product-limit estimator. `min_neighbours` is off
    /// unless given: widening the survival smoothers in sparse regions
    /// biases the censoring weights.
    Kernel {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidth: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_neighbours: Option<usize>,
    },
}

impl SurvivalSpec {
    pub fn kernel() -> Self {
        SurvivalSpec::Kernel {
            bandwidth: None,
            min_neighbours: None,
        }
    }

    pub fn cox(features: Option<Vec<Term>>) -> Self {
        SurvivalSpec::Cox {
            features,
            treated_features: None,
        }
    }
}

/// Which nuisance models to fit and how. `None` skips a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub propensity: Option<ProbabilitySpec>,
    /// Sampling score for inverse sampling-score weighting.
    pub sampling_score: Option<ProbabilitySpec>,
    pub calibration: Option<MomentSpec>,
    pub outcome: Option<SurvivalSpec>,
    pub censoring: Option<SurvivalSpec>,
}

impl Default for ModelSpec {
    /// Main-effect logistic and Cox models with first-moment calibration.
    fn default() -> Self {
        Self {
            propensity: Some(ProbabilitySpec::logistic(None)),
            sampling_score: Some(ProbabilitySpec::logistic(None)),
            calibration: Some(MomentSpec::first()),
            outcome: Some(SurvivalSpec::cox(None)),
            censoring: Some(SurvivalSpec::cox(None)),
        }
    }
}

impl ModelSpec {
    /// Kernel learners throughout with first- and second-moment calibration.
    pub fn kernel() -> Self {
        Self {
            propensity: Some(ProbabilitySpec::kernel()),
            sampling_score: None,
            calibration: Some(MomentSpec::first_and_second()),
            outcome: Some(SurvivalSpec::kernel()),
            censoring: Some(SurvivalSpec::kernel()),
        }
    }

    /// Drops models none of `kinds` uses.
    pub fn restricted_to(&self, kinds: &[EstimatorKind]) -> Self {
        let any = |f: fn(EstimatorKind) -> bool| kinds.iter().any(|&k| f(k));
        Self {
            propensity: self.propensity.clone().filter(|_| any(EstimatorKind::needs_propensity)),
            sampling_score: self.sampling_score.clone().filter(|_| any(EstimatorKind::needs_sampling_score)),
            calibration: self.calibration.clone().filter(|_| any(EstimatorKind::needs_calibration)),
            outcome: self.outcome.clone().filter(|_| any(EstimatorKind::needs_outcome)),
            censoring: self.censoring.clone().filter(|_| any(EstimatorKind::needs_censoring)),
        }
    }
}

fn feature_map(terms: &Option<Vec<Term>>, p: usize) -> Result<FeatureMap> {
    Ok(match terms {
        Some(t) => FeatureMap::new(t.clone(), p)?,
        None => FeatureMap::identity(p),
    })
}

/// Sampling score recovered from a source-vs-target classifier: with the
/// target rows weighted by their design weights, the classifier's odds
/// estimate `P(I_S = 1 | X)`.
#[derive(Debug, Clone)]
pub struct OddsScore(pub Arc<dyn ProbabilityModel>);

impl ProbabilityModel for OddsScore {
    fn probability(&self, x: &[f64]) -> f64 {
        let p = self.0.probability(x);
        (p / (1.0 - p)).min(1.0)
    }
}

fn fit_probability(
    spec: &ProbabilitySpec,
    rows: &[&[f64]],
    labels: &[bool],
    weights: Option<&[f64]>,
    p: usize,
    model: &'static str,
) -> Result<Arc<dyn ProbabilityModel>> {
    Ok(match spec {
        ProbabilitySpec::Logistic { features } => {
            let map = feature_map(features, p)?;
            Arc::new(fit_logistic(&map, rows, labels, weights).map_err(Error::fit(model))?)
        }
        ProbabilitySpec::Kernel {
            bandwidth,
            min_neighbours,
        } => Arc::new(
            fit_kernel_logistic(rows, labels, weights, *bandwidth)
                .map_err(Error::fit(model))?
                .with_min_neighbours(min_neighbours.unwrap_or(DEFAULT_MIN_NEIGHBOURS)),
        ),
    })
}

fn fit_survival(
    spec: &SurvivalSpec,
    source: &SourceSample,
    events: EventSource,
    model: &'static str,
) -> Result<Arc<dyn crate::nuisance::SurvivalModel>> {
    let p = source.dim();
    Ok(match spec {
        SurvivalSpec::Cox {
            features,
            treated_features,
        } => {
            let control = feature_map(features, p)?;
            let treated = match treated_features {
                Some(_) => feature_map(treated_features, p)?,
                None => control.clone(),
            };
            Arc::new(CoxSurvival::fit(source, events, &[control, treated]).map_err(Error::fit(model))?)
        }
        SurvivalSpec::Kernel {
            bandwidth,
            min_neighbours,
        } => Arc::new(
            fit_kernel_survival(source, events, *bandwidth)
                .map_err(Error::fit(model))?
                .with_min_neighbours(min_neighbours.unwrap_or(0)),
        ),
    })
}

/// Fits every model named in `spec` on the given samples.
pub fn fit_nuisances(source: &SourceSample, target: &TargetSample, spec: &ModelSpec) -> Result<NuisanceSet> {
    let p = source.dim();
    if target.dim() != p {
        return Err(crate::data::DataError::DimensionMismatch {
            expected: p,
            found: target.dim(),
        }
        .into());
    }
    let src_rows: Vec<&[f64]> = source.records().iter().map(|r| r.x.as_slice()).collect();
    let mut set = NuisanceSet::default();
    if let Some(ps) = &spec.propensity {
        let labels: Vec<bool> = source.records().iter().map(|r| r.arm.is_treated()).collect();
        set.propensity = Some(fit_probability(ps, &src_rows, &labels, None, p, "propensity")?);
    }
    if let Some(ss) = &spec.sampling_score {
        let mut rows = src_rows.clone();
        rows.extend(target.records().iter().map(|r| r.x.as_slice()));
        let mut labels = vec![true; source.len()];
        labels.extend(std::iter::repeat_n(false, target.len()));
        let mut weights = vec![1.0; source.len()];
        weights.extend(target.records().iter().map(|r| r.design_weight));
        let classifier = fit_probability(ss, &rows, &labels, Some(&weights), p, "sampling score")?;
        set.sampling_score = Some(Arc::new(OddsScore(classifier)));
    }
    if let Some(ms) = &spec.calibration {
        let map = ms.feature_map(p)?;
        let g = target_moments(target, &map);
        set.calibration = Some(solve_calibration(source, &g, &map)?);
    }
    if let Some(os) = &spec.outcome {
        set.outcome = Some(fit_survival(os, source, EventSource::Outcome, "outcome")?);
    }
    if let Some(cs) = &spec.censoring {
        set.censoring = Some(fit_survival(cs, source, EventSource::Censoring, "censoring")?);
    }
    Ok(set)
}

/// Learned (or supplied) rule and its estimated value for one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub kind: EstimatorKind,
    pub rule: LinearRule,
    pub estimate: f64,
    /// Plug-in influence-function standard error, where available.
    pub std_error: Option<f64>,
    pub search: Option<SearchResult>,
}

/// Fits nuisances on the full samples, then for each estimator searches for
/// the rule maximizing its value (or evaluates `fixed`). The search for the
/// `i`-th estimator uses seed `ga.seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn fit_rules(
    source: &SourceSample,
    target: &TargetSample,
    spec: &ModelSpec,
    functional: Functional,
    kinds: &[EstimatorKind],
    ga: &GaConfig,
    fixed: Option<&LinearRule>,
    options: &EstimatorOptions,
) -> Result<Vec<FitOutcome>> {
    let nuisances = fit_nuisances(source, target, &spec.restricted_to(kinds))?;
    let grid = EvalGrid::for_functional(functional, source)?;
    let table = ValueTable::build(source, target, &nuisances, &grid, options, fixed)?;
    kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let (rule, search) = match fixed {
                Some(r) => (r.clone(), None),
                None => {
                    let cfg = GaConfig {
                        seed: ga.seed.wrapping_add(i as u64),
                        ..ga.clone()
                    };
                    let found = genetic_search(|r| table.estimate(kind, r).unwrap_or(f64::NAN), source.dim(), &cfg)?;
                    (found.best_rule.clone(), Some(found))
                }
            };
            let value = table.estimate_with_eif(kind, &rule)?;
            let std_error = match &value.eif {
                Some(_) => Some(value.eif_variance()?.1),
                None => None,
            };
            Ok(FitOutcome {
                kind,
                rule,
                estimate: value.estimate,
                std_error,
                search,
            })
        })
        .collect()
}

/// Values of `rules[k]` under `kinds[k]` after refitting every nuisance on
/// the given samples.
pub fn evaluate_rules(
    source: &SourceSample,
    target: &TargetSample,
    spec: &ModelSpec,
    functional: Functional,
    kinds: &[EstimatorKind],
    rules: &[LinearRule],
    options: &EstimatorOptions,
) -> Result<Vec<f64>> {
    let nuisances = fit_nuisances(source, target, &spec.restricted_to(kinds))?;
    let grid = EvalGrid::for_functional(functional, source)?;
    let table = ValueTable::build_for_rules(source, target, &nuisances, &grid, options, rules)?;
    kinds
        .iter()
        .zip(rules)
        .map(|(&k, r)| Ok(table.estimate(k, r)?))
        .collect()
}
