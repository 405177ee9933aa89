//! Value estimators for survival-probability and restricted-mean targets.
//!
//! Every estimator is a weighted sum of per-subject quantities that do not
//! depend on the rule except through the arm it assigns. [`ValueTable`]
//! precomputes those quantities once for a fixed set of nuisance functions
//! and evaluation grid, after which each rule costs one pass over the
//! samples. Policy search, cross-fitting and the bootstrap all go through it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationWeights;
use crate::data::{Arm, LinearRule, SourceRecord, SourceSample, TargetSample};
use crate::nuisance::{
    ProbabilityModel, SurvivalModel, CENSORING_FLOOR, PROPENSITY_FLOOR, SAMPLING_SCORE_FLOOR,
};
use crate::step::StepFunction;

/// Below this effective sample size a weighting scheme is considered degenerate.
pub const MIN_EFFECTIVE_SAMPLE_SIZE: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("estimator {kind} needs a {nuisance} model")]
    MissingNuisance {
        kind: EstimatorKind,
        nuisance: &'static str,
    },
    #[error("{scheme} weights are degenerate (effective sample size {ess:.2})")]
    DegenerateWeights { scheme: &'static str, ess: f64 },
    #[error("censoring survival is zero or not finite for a source subject")]
    ZeroSurvival,
    #[error("no influence-function values are available")]
    MissingEif,
    #[error("rule has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("table was built for a different rule")]
    RuleOutOfScope,
    #[error("horizon must be positive and finite")]
    InvalidHorizon,
    #[error("source and target covariate dimensions differ ({source_dim} vs {target_dim})")]
    SampleMismatch { source_dim: usize, target_dim: usize },
}

/// The estimators compared in the simulation study, plus the single-sample
/// doubly robust estimator that ignores the target sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Naive,
    Ipsw,
    CwIpw,
    CwOr,
    Ort,
    Acw,
    DrSource,
}

impl EstimatorKind {
    /// The six estimators reported in simulation tables.
    pub const REPORTED: [EstimatorKind; 6] = [
        EstimatorKind::Naive,
        EstimatorKind::Ipsw,
        EstimatorKind::CwIpw,
        EstimatorKind::CwOr,
        EstimatorKind::Ort,
        EstimatorKind::Acw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Ipsw => "ipsw",
            EstimatorKind::CwIpw => "cw-ipw",
            EstimatorKind::CwOr => "cw-or",
            EstimatorKind::Ort => "ort",
            EstimatorKind::Acw => "acw",
            EstimatorKind::DrSource => "dr-source",
        }
    }

    pub fn needs_propensity(self) -> bool {
        !matches!(self, EstimatorKind::CwOr | EstimatorKind::Ort)
    }

    pub fn needs_censoring(self) -> bool {
        self.needs_propensity()
    }

    pub fn needs_outcome(self) -> bool {
        matches!(
            self,
            EstimatorKind::CwOr | EstimatorKind::Ort | EstimatorKind::Acw | EstimatorKind::DrSource
        )
    }

    pub fn needs_calibration(self) -> bool {
        matches!(self, EstimatorKind::CwIpw | EstimatorKind::CwOr | EstimatorKind::Acw)
    }

    pub fn needs_sampling_score(self) -> bool {
        self == EstimatorKind::Ipsw
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown estimator `{0}`")]
pub struct UnknownEstimator(pub String);

impl FromStr for EstimatorKind {
    type Err = UnknownEstimator;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "naive" => EstimatorKind::Naive,
            "ipsw" => EstimatorKind::Ipsw,
            "cw-ipw" | "cwipw" => EstimatorKind::CwIpw,
            "cw-or" | "cwor" => EstimatorKind::CwOr,
            "ort" => EstimatorKind::Ort,
            "acw" => EstimatorKind::Acw,
            "dr-source" | "dr" => EstimatorKind::DrSource,
            _ => return Err(UnknownEstimator(s.to_string())),
        })
    }
}

impl Serialize for EstimatorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for EstimatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Target functional of the counterfactual survival curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "horizon", rename_all = "snake_case")]
pub enum Functional {
    /// `S_d(t) = P(T(d) > t)`.
    SurvivalAt(f64),
    /// `int_0^L S_d(t) dt`.
    Rmst(f64),
}

impl Functional {
    pub fn horizon(self) -> f64 {
        match self {
            Functional::SurvivalAt(t) | Functional::Rmst(t) => t,
        }
    }
}

/// Time points and weights such that the functional equals
/// `sum_k w_k S_d(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    times: Vec<f64>,
    weights: Vec<f64>,
}

impl EvalGrid {
    pub fn point(t: f64) -> Self {
        Self {
            times: vec![t],
            weights: vec![1.0],
        }
    }

    /// Grid `{0} ∪ {source event times in (0, L)}` with interval widths up to `L`.
    pub fn rmst(horizon: f64, source: &SourceSample) -> Self {
        let mut events: Vec<f64> = source
            .records()
            .iter()
            .filter(|r| r.event && r.time > 0.0 && r.time < horizon)
            .map(|r| r.time)
            .collect();
        events.sort_by(f64::total_cmp);
        events.dedup();
        let mut times = Vec::with_capacity(events.len() + 1);
        times.push(0.0);
        times.extend(events);
        let weights = times
            .iter()
            .enumerate()
            .map(|(k, &t)| times.get(k + 1).copied().unwrap_or(horizon) - t)
            .collect();
        Self { times, weights }
    }

    pub fn for_functional(functional: Functional, source: &SourceSample) -> Result<Self, EstimatorError> {
        let h = functional.horizon();
        if !(h.is_finite() && h > 0.0) {
            return Err(EstimatorError::InvalidHorizon);
        }
        Ok(match functional {
            Functional::SurvivalAt(t) => Self::point(t),
            Functional::Rmst(l) => Self::rmst(l, source),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Fitted nuisance functions. Estimators use only the members they need.
#[derive(Debug, Clone, Default)]
pub struct NuisanceSet {
    pub propensity: Option<Arc<dyn ProbabilityModel>>,
    pub sampling_score: Option<Arc<dyn ProbabilityModel>>,
    pub calibration: Option<CalibrationWeights>,
    pub outcome: Option<Arc<dyn SurvivalModel>>,
    pub censoring: Option<Arc<dyn SurvivalModel>>,
}

impl NuisanceSet {
    pub fn with_propensity(mut self, m: impl ProbabilityModel + 'static) -> Self {
        self.propensity = Some(Arc::new(m));
        self
    }

    pub fn with_sampling_score(mut self, m: impl ProbabilityModel + 'static) -> Self {
        self.sampling_score = Some(Arc::new(m));
        self
    }

    pub fn with_calibration(mut self, w: CalibrationWeights) -> Self {
        self.calibration = Some(w);
        self
    }

    pub fn with_outcome(mut self, m: impl SurvivalModel + 'static) -> Self {
        self.outcome = Some(Arc::new(m));
        self
    }

    pub fn with_censoring(mut self, m: impl SurvivalModel + 'static) -> Self {
        self.censoring = Some(Arc::new(m));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub propensity_floor: f64,
    pub sampling_score_floor: f64,
    pub censoring_floor: f64,
    /// Normalize inverse sampling-score weights to sum to one.
    pub hajek_ipsw: bool,
    /// When set, the target block uses `e_j / N` instead of normalized
    /// design weights.
    pub population_size: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            propensity_floor: PROPENSITY_FLOOR,
            sampling_score_floor: SAMPLING_SCORE_FLOOR,
            censoring_floor: CENSORING_FLOOR,
            hajek_ipsw: false,
            population_size: None,
        }
    }
}

/// Compensated (Neumaier) summation.
#[derive(Default, Clone, Copy)]
struct Sum {
    total: f64,
    compensation: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.compensation += (self.total - t) + v;
        } else {
            self.compensation += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.compensation
    }
}

/// Censoring-martingale jumps of one subject: `(u_j, dN_C(u_j)/S(u_j) - d(1/S)(u_j))`
/// on the censoring curve's knots up to `U`, plus `U` itself.
fn martingale_increments(
    record: &SourceRecord,
    censoring: &StepFunction,
    floor: f64,
) -> Result<Vec<(f64, f64)>, EstimatorError> {
    let clipped = |s: f64| -> Result<f64, EstimatorError> {
        let v = s.max(floor);
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(EstimatorError::ZeroSurvival)
        }
    };
    let u = record.time;
    let knots = censoring.knots();
    let values = censoring.values();
    let end = knots.partition_point(|&k| k <= u);
    let mut out = Vec::with_capacity(end + 1);
    let mut prev = 1.0 / clipped(censoring.value_before_first())?;
    for j in 0..end {
        let inv = 1.0 / clipped(values[j])?;
        let mut m = prev - inv;
        if knots[j] == u && !record.event {
            m += inv;
        }
        out.push((knots[j], m));
        prev = inv;
    }
    if end == 0 || knots[end - 1] != u {
        out.push((u, if record.event { 0.0 } else { prev }));
    }
    Ok(out)
}

/// `int dM_C(u) / S_C(u) Q(u)` for one subject, with `Q(u)` applied for
/// `u <= horizon` and `Q = 1` afterwards.
///
/// The integral is evaluated on the censoring curve's knots up to the
/// subject's observed time. With `Q = 1` the sum telescopes to
/// `1 - Delta / S_C(U)`.
pub fn censoring_martingale_term(
    record: &SourceRecord,
    censoring: &StepFunction,
    q: impl Fn(f64) -> f64,
    horizon: f64,
    floor: f64,
) -> Result<f64, EstimatorError> {
    let mut sum = Sum::default();
    for (u, m) in martingale_increments(record, censoring, floor)? {
        let weight = if u <= horizon { q(u) } else { 1.0 };
        sum.add(weight * m);
    }
    Ok(sum.value())
}

/// Rule-independent per-subject quantities for one source subject.
#[derive(Debug, Clone)]
struct SourceTerms {
    /// `sum_k w_k Delta I{U > t_k} / S_C(U)`.
    ipcw: f64,
    /// `sum_k w_k S(t_k | a, X)` per arm (NaN when not needed).
    or: [f64; 2],
    /// `sum_k w_k M(t_k)` where `M(t)` is the censoring-martingale term with
    /// `Q(u) = S(t | A, X) / S(u | A, X)`.
    mg: f64,
}

fn source_terms(
    record: &SourceRecord,
    grid: &EvalGrid,
    censoring: Option<&dyn SurvivalModel>,
    outcome: Option<&dyn SurvivalModel>,
    arms: [bool; 2],
    floor: f64,
) -> Result<SourceTerms, EstimatorError> {
    let mut terms = SourceTerms {
        ipcw: f64::NAN,
        or: [f64::NAN; 2],
        mg: f64::NAN,
    };
    let own_curve = outcome.map(|m| m.curve(record.arm, &record.x));
    if let Some(m) = outcome {
        for arm in Arm::BOTH {
            if arms[arm.index()] {
                terms.or[arm.index()] = match &own_curve {
                    Some(c) if arm == record.arm => c
                        .sample_sorted(&grid.times)
                        .iter()
                        .zip(&grid.weights)
                        .map(|(s, w)| s * w)
                        .sum(),
                    _ => m.weighted_sum(arm, &record.x, &grid.times, &grid.weights),
                };
            }
        }
    }
    let Some(cens) = censoring else {
        return Ok(terms);
    };
    let cens_curve = cens.curve(record.arm, &record.x);
    let sc = cens_curve.eval(record.time).max(floor);
    if !(sc.is_finite() && sc > 0.0) {
        return Err(EstimatorError::ZeroSurvival);
    }
    terms.ipcw = if record.event {
        grid.times
            .iter()
            .zip(&grid.weights)
            .filter(|(t, _)| record.time > **t)
            .map(|(_, w)| w)
            .sum::<f64>()
            / sc
    } else {
        0.0
    };
    if let Some(surv) = own_curve {
        let increments = martingale_increments(record, &cens_curve, floor)?;
        let total: f64 = increments.iter().map(|(_, m)| m).sum();
        let s_grid = surv.sample_sorted(&grid.times);
        let s_inc = surv.sample_sorted(&increments.iter().map(|(u, _)| *u).collect::<Vec<_>>());
        let (mut j, mut scaled, mut passed) = (0, 0.0, 0.0);
        let mut mg = 0.0;
        for ((t, w), s_t) in grid.times.iter().zip(&grid.weights).zip(&s_grid) {
            while j < increments.len() && increments[j].0 <= *t {
                let (_, m) = increments[j];
                if s_inc[j] > 0.0 {
                    scaled += m / s_inc[j];
                }
                passed += m;
                j += 1;
            }
            mg += w * (s_t * scaled + (total - passed));
        }
        terms.mg = mg;
    }
    Ok(terms)
}

fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

/// Precomputed per-subject quantities for fast evaluation of many rules.
#[derive(Debug, Clone)]
pub struct ValueTable {
    p: usize,
    scope: Option<Vec<LinearRule>>,
    options: EstimatorOptions,
    source_x: Vec<Vec<f64>>,
    source_arm: Vec<Arm>,
    /// `P(A = 1 | X)` before flooring; empty without a propensity model.
    pi_treated: Vec<f64>,
    terms: Vec<SourceTerms>,
    calibration: Vec<f64>,
    ipsw: Vec<f64>,
    target_x: Vec<Vec<f64>>,
    target_weight: Vec<f64>,
    target_or: Vec<[f64; 2]>,
    has_censoring: bool,
    has_outcome: bool,
}

/// Value estimate with optional per-subject influence values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub kind: EstimatorKind,
    pub estimate: f64,
    /// Influence values over target then source subjects, scaled so that
    /// `mean(phi^2) / len` estimates the variance of `estimate`.
    pub eif: Option<Vec<f64>>,
}

impl ValueEstimate {
    /// `(variance, standard error)` from the influence values.
    pub fn eif_variance(&self) -> Result<(f64, f64), EstimatorError> {
        let eif = self.eif.as_ref().ok_or(EstimatorError::MissingEif)?;
        Ok(eif_variance(eif, eif.len()))
    }
}

/// `sigma^2 = mean(phi^2)` and `SE = sigma / sqrt(n_total)`.
pub fn eif_variance(eif: &[f64], n_total: usize) -> (f64, f64) {
    if eif.is_empty() {
        return (0.0, 0.0);
    }
    let var = eif.iter().map(|v| v * v).sum::<f64>() / eif.len() as f64;
    (var, (var / n_total as f64).sqrt())
}

impl ValueTable {
    /// Precomputes everything the available nuisances allow. With `scope`
    /// set, only quantities needed for that single rule are computed.
    pub fn build(
        source: &SourceSample,
        target: &TargetSample,
        nuisances: &NuisanceSet,
        grid: &EvalGrid,
        options: &EstimatorOptions,
        scope: Option<&LinearRule>,
    ) -> Result<Self, EstimatorError> {
        Self::build_scoped(
            source,
            target,
            nuisances,
            grid,
            options,
            scope.map(std::slice::from_ref),
        )
    }

    /// Like [`ValueTable::build`], restricted to a set of rules.
    pub fn build_for_rules(
        source: &SourceSample,
        target: &TargetSample,
        nuisances: &NuisanceSet,
        grid: &EvalGrid,
        options: &EstimatorOptions,
        rules: &[LinearRule],
    ) -> Result<Self, EstimatorError> {
        Self::build_scoped(source, target, nuisances, grid, options, Some(rules))
    }

    fn build_scoped(
        source: &SourceSample,
        target: &TargetSample,
        nuisances: &NuisanceSet,
        grid: &EvalGrid,
        options: &EstimatorOptions,
        scope: Option<&[LinearRule]>,
    ) -> Result<Self, EstimatorError> {
        let p = source.dim();
        if target.dim() != p {
            return Err(EstimatorError::SampleMismatch {
                source_dim: p,
                target_dim: target.dim(),
            });
        }
        if let Some(rules) = scope {
            for rule in rules {
                check_rule(rule, p)?;
            }
        }
        let arms_for = |x: &[f64]| match scope {
            Some(rules) => {
                let mut arms = [false; 2];
                for rule in rules {
                    arms[rule.decide(x).index()] = true;
                }
                arms
            }
            None => [true, true],
        };
        let censoring = nuisances.censoring.as_deref();
        let outcome = nuisances.outcome.as_deref();
        let terms = source
            .records()
            .par_iter()
            .map(|r| source_terms(r, grid, censoring, outcome, arms_for(&r.x), options.censoring_floor))
            .collect::<Result<Vec<_>, _>>()?;
        let pi_treated = match &nuisances.propensity {
            Some(m) => source.records().iter().map(|r| m.probability(&r.x)).collect(),
            None => Vec::new(),
        };
        let calibration = match &nuisances.calibration {
            Some(w) => w.weights_for(source.records().iter().map(|r| r.x.as_slice())),
            None => Vec::new(),
        };
        let ipsw = match &nuisances.sampling_score {
            Some(m) => {
                let inv: Vec<f64> = source
                    .records()
                    .iter()
                    .map(|r| 1.0 / m.probability(&r.x).max(options.sampling_score_floor))
                    .collect();
                let norm = if options.hajek_ipsw {
                    inv.iter().sum::<f64>()
                } else {
                    target.total_weight()
                };
                inv.iter().map(|v| v / norm).collect()
            }
            None => Vec::new(),
        };
        let target_or = match outcome {
            Some(m) => target
                .records()
                .par_iter()
                .map(|r| {
                    let arms = arms_for(&r.x);
                    let mut out = [f64::NAN; 2];
                    for arm in Arm::BOTH {
                        if arms[arm.index()] {
                            out[arm.index()] = m.weighted_sum(arm, &r.x, &grid.times, &grid.weights);
                        }
                    }
                    out
                })
                .collect(),
            None => Vec::new(),
        };
        let total = target.total_weight();
        let target_weight = target
            .records()
            .iter()
            .map(|r| r.design_weight / options.population_size.unwrap_or(total))
            .collect();
        Ok(Self {
            p,
            scope: scope.map(<[LinearRule]>::to_vec),
            options: *options,
            source_x: source.records().iter().map(|r| r.x.clone()).collect(),
            source_arm: source.records().iter().map(|r| r.arm).collect(),
            pi_treated,
            terms,
            calibration,
            ipsw,
            target_x: target.records().iter().map(|r| r.x.clone()).collect(),
            target_weight,
            target_or,
            has_censoring: censoring.is_some(),
            has_outcome: outcome.is_some(),
        })
    }

    pub fn source_len(&self) -> usize {
        self.source_x.len()
    }

    pub fn target_len(&self) -> usize {
        self.target_x.len()
    }

    /// Calibration weights on this table's source sample.
    pub fn calibration_weights(&self) -> &[f64] {
        &self.calibration
    }

    fn check(&self, kind: EstimatorKind, rule: &LinearRule) -> Result<(), EstimatorError> {
        check_rule(rule, self.p)?;
        if let Some(scope) = &self.scope {
            if !scope.contains(rule) {
                return Err(EstimatorError::RuleOutOfScope);
            }
        }
        let missing = |nuisance| Err(EstimatorError::MissingNuisance { kind, nuisance });
        if kind.needs_propensity() && self.pi_treated.is_empty() {
            return missing("propensity");
        }
        if kind.needs_censoring() && !self.has_censoring {
            return missing("censoring");
        }
        if kind.needs_outcome() && !self.has_outcome {
            return missing("outcome");
        }
        if kind.needs_calibration() {
            if self.calibration.is_empty() {
                return missing("calibration");
            }
            let ess = effective_sample_size(&self.calibration);
            if ess < MIN_EFFECTIVE_SAMPLE_SIZE {
                return Err(EstimatorError::DegenerateWeights {
                    scheme: "calibration",
                    ess,
                });
            }
        }
        if kind.needs_sampling_score() {
            if self.ipsw.is_empty() {
                return missing("sampling score");
            }
            let ess = effective_sample_size(&self.ipsw);
            if ess < MIN_EFFECTIVE_SAMPLE_SIZE {
                return Err(EstimatorError::DegenerateWeights {
                    scheme: "sampling-score",
                    ess,
                });
            }
        }
        Ok(())
    }

    /// `I{A_i = d_i} / pi_d(X_i)` (floored), or 0 when the arm disagrees.
    fn inverse_propensity(&self, i: usize, d: Arm) -> f64 {
        if self.source_arm[i] != d {
            return 0.0;
        }
        let p1 = self.pi_treated[i];
        let pd = if d == Arm::Treated { p1 } else { 1.0 - p1 };
        1.0 / pd.max(self.options.propensity_floor)
    }

    /// `(I{A = d} / pi_d) * (IPCW - S(.|A) + martingale)` for source subject `i`.
    fn augmentation(&self, i: usize, d: Arm) -> f64 {
        let ip = self.inverse_propensity(i, d);
        if ip == 0.0 {
            return 0.0;
        }
        let t = &self.terms[i];
        ip * (t.ipcw - t.or[d.index()] + t.mg)
    }

    fn target_term(&self) -> impl Fn(usize, &LinearRule) -> f64 + '_ {
        |j, rule| self.target_or[j][rule.decide(&self.target_x[j]).index()]
    }

    /// Value of `rule` under estimator `kind`.
    pub fn estimate(&self, kind: EstimatorKind, rule: &LinearRule) -> Result<f64, EstimatorError> {
        self.check(kind, rule)?;
        let n = self.source_len() as f64;
        let src = 0..self.source_len();
        let decide = |i: usize| rule.decide(&self.source_x[i]);
        let ipw = |i: usize, w: f64| {
            let d = decide(i);
            w * self.inverse_propensity(i, d) * self.terms[i].ipcw
        };
        let target_block = || {
            let f = self.target_term();
            (0..self.target_len())
                .map(|j| self.target_weight[j] * f(j, rule))
                .sum::<f64>()
        };
        Ok(match kind {
            EstimatorKind::Naive => src.map(|i| ipw(i, 1.0 / n)).sum(),
            EstimatorKind::Ipsw => src.map(|i| ipw(i, self.ipsw[i])).sum(),
            EstimatorKind::CwIpw => src.map(|i| ipw(i, self.calibration[i])).sum(),
            EstimatorKind::CwOr => src
                .map(|i| self.calibration[i] * self.terms[i].or[decide(i).index()])
                .sum(),
            EstimatorKind::Ort => target_block(),
            EstimatorKind::Acw => {
                target_block()
                    + src
                        .map(|i| self.calibration[i] * self.augmentation(i, decide(i)))
                        .sum::<f64>()
            }
            EstimatorKind::DrSource => src
                .map(|i| {
                    let d = decide(i);
                    (self.terms[i].or[d.index()] + self.augmentation(i, d)) / n
                })
                .sum(),
        })
    }

    /// Estimate plus influence values (ACW and DR_SOURCE only carry them).
    pub fn estimate_with_eif(
        &self,
        kind: EstimatorKind,
        rule: &LinearRule,
    ) -> Result<ValueEstimate, EstimatorError> {
        let estimate = self.estimate(kind, rule)?;
        let eif = match kind {
            EstimatorKind::Acw => {
                let total = (self.source_len() + self.target_len()) as f64;
                let f = self.target_term();
                let mut eif: Vec<f64> = (0..self.target_len())
                    .map(|j| total * self.target_weight[j] * (f(j, rule) - estimate))
                    .collect();
                eif.extend((0..self.source_len()).map(|i| {
                    let d = rule.decide(&self.source_x[i]);
                    total * self.calibration[i] * self.augmentation(i, d)
                }));
                Some(eif)
            }
            EstimatorKind::DrSource => Some(
                (0..self.source_len())
                    .map(|i| {
                        let d = rule.decide(&self.source_x[i]);
                        self.terms[i].or[d.index()] + self.augmentation(i, d) - estimate
                    })
                    .collect(),
            ),
            _ => None,
        };
        Ok(ValueEstimate {
            kind,
            estimate,
            eif,
        })
    }

    /// The ACW source block with the martingale term removed, for checking
    /// the estimator's algebraic decomposition.
    #[cfg(test)]
    pub(crate) fn martingale_block(&self, rule: &LinearRule) -> f64 {
        (0..self.source_len())
            .map(|i| {
                let d = rule.decide(&self.source_x[i]);
                self.calibration[i] * self.inverse_propensity(i, d) * self.terms[i].mg
            })
            .sum()
    }
}

fn check_rule(rule: &LinearRule, p: usize) -> Result<(), EstimatorError> {
    if rule.dim() != p {
        return Err(EstimatorError::DimensionMismatch {
            expected: p,
            found: rule.dim(),
        });
    }
    Ok(())
}

/// One-shot estimate of a functional for one rule.
pub fn estimate_value(
    kind: EstimatorKind,
    source: &SourceSample,
    target: &TargetSample,
    nuisances: &NuisanceSet,
    rule: &LinearRule,
    functional: Functional,
    options: &EstimatorOptions,
) -> Result<ValueEstimate, EstimatorError> {
    let grid = EvalGrid::for_functional(functional, source)?;
    ValueTable::build(source, target, nuisances, &grid, options, Some(rule))?.estimate_with_eif(kind, rule)
}

/// Pointwise estimates of `S_d(t)` on an ascending grid, as a step function
/// equal to one before the first grid point.
pub fn survival_curve(
    kind: EstimatorKind,
    source: &SourceSample,
    target: &TargetSample,
    nuisances: &NuisanceSet,
    rule: &LinearRule,
    grid: &[f64],
    options: &EstimatorOptions,
) -> Result<StepFunction, EstimatorError> {
    let values = grid
        .iter()
        .map(|&t| {
            let g = EvalGrid::point(t);
            ValueTable::build(source, target, nuisances, &g, options, Some(rule))?.estimate(kind, rule)
        })
        .collect::<Result<Vec<_>, _>>()?;
    StepFunction::new(grid.to_vec(), values, 1.0).map_err(|_| EstimatorError::InvalidHorizon)
}

/// `int_0^L S(t) dt` of a step curve that equals one before its first knot.
pub fn rmst_from_curve(curve: &StepFunction, horizon: f64) -> f64 {
    curve.integral(0.0, horizon)
}
