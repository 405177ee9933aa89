use nalgebra::{DMatrix, DVector};

use super::newton::{self, Evaluation};
use super::{FitError, SurvivalModel};
use crate::data::{Arm, SourceSample};
use crate::features::FeatureMap;
use crate::step::StepFunction;

/// Which counting process a Cox model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    /// Events are `delta = 1`.
    Outcome,
    /// Events are `delta = 0` (censoring treated as the event).
    Censoring,
}

/// Arm-specific Cox model `Lambda(t | x) = Lambda_0(t) exp(beta . g(x))`
/// with a Breslow cumulative baseline hazard.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxModel {
    arm: Arm,
    source: EventSource,
    features: FeatureMap,
    beta: Vec<f64>,
    baseline: StepFunction,
    gradient_norm: f64,
}

impl CoxModel {
    pub fn arm(&self) -> Arm {
        self.arm
    }

    pub fn event_source(&self) -> EventSource {
        self.source
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Breslow estimate of `Lambda_0`, with `Lambda_0(0) = 0`.
    pub fn baseline_cumulative_hazard(&self) -> &StepFunction {
        &self.baseline
    }

    /// Partial-likelihood score sup-norm at the fitted coefficients.
    pub fn gradient_norm(&self) -> f64 {
        self.gradient_norm
    }

    pub fn relative_risk(&self, x: &[f64]) -> f64 {
        self.features
            .terms()
            .iter()
            .zip(&self.beta)
            .map(|(t, b)| b * t.eval(x))
            .sum::<f64>()
            .exp()
    }

    /// `S(t | x) = exp(-Lambda_0(t) exp(beta . g(x)))` as a step function.
    pub fn survival_curve(&self, x: &[f64]) -> StepFunction {
        let r = self.relative_risk(x);
        StepFunction::from_sorted(
            self.baseline.knots().to_vec(),
            self.baseline.values().iter().map(|h| (-h * r).exp()).collect(),
            1.0,
        )
    }
}

/// Outcome or censoring survival from a pair of arm-specific Cox models.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxSurvival {
    models: [CoxModel; 2],
}

impl CoxSurvival {
    pub fn new(control: CoxModel, treated: CoxModel) -> Self {
        assert_eq!(control.arm, Arm::Control);
        assert_eq!(treated.arm, Arm::Treated);
        Self {
            models: [control, treated],
        }
    }

    pub fn model(&self, arm: Arm) -> &CoxModel {
        &self.models[arm.index()]
    }

    /// Fits both arms with their own feature maps.
    pub fn fit(
        sample: &SourceSample,
        source: EventSource,
        maps: &[FeatureMap; 2],
    ) -> Result<Self, FitError> {
        Ok(Self::new(
            fit_cox(sample, Arm::Control, source, &maps[0])?,
            fit_cox(sample, Arm::Treated, source, &maps[1])?,
        ))
    }
}

impl SurvivalModel for CoxSurvival {
    fn curve(&self, arm: Arm, x: &[f64]) -> StepFunction {
        self.models[arm.index()].survival_curve(x)
    }

    fn survival(&self, t: f64, arm: Arm, x: &[f64]) -> f64 {
        let m = &self.models[arm.index()];
        (-m.baseline.eval(t) * m.relative_risk(x)).exp()
    }

    fn weighted_sum(&self, arm: Arm, x: &[f64], times: &[f64], weights: &[f64]) -> f64 {
        let m = &self.models[arm.index()];
        let r = m.relative_risk(x);
        let (knots, hazards) = (m.baseline.knots(), m.baseline.values());
        let mut j = 0;
        let mut current = 1.0;
        let mut total = 0.0;
        for (&t, &w) in times.iter().zip(weights) {
            if j < knots.len() && knots[j] <= t {
                while j < knots.len() && knots[j] <= t {
                    j += 1;
                }
                current = (-hazards[j - 1] * r).exp();
            }
            total += w * current;
        }
        total
    }
}

/// Fits the arm-specific Cox model on `sample` with features `g(x)`.
pub fn fit_cox(
    sample: &SourceSample,
    arm: Arm,
    source: EventSource,
    features: &FeatureMap,
) -> Result<CoxModel, FitError> {
    let records: Vec<_> = sample.records().iter().filter(|r| r.arm == arm).collect();
    if records.is_empty() {
        return Err(FitError::EmptyArm(arm));
    }
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let events: Vec<bool> = records
        .iter()
        .map(|r| match source {
            EventSource::Outcome => r.event,
            EventSource::Censoring => !r.event,
        })
        .collect();
    let covariates: Vec<&[f64]> = records.iter().map(|r| r.x.as_slice()).collect();
    fit_cox_data(&times, &events, &covariates, features)
        .map(|fit| CoxModel {
            arm,
            source,
            features: features.clone(),
            beta: fit.beta,
            baseline: fit.baseline,
            gradient_norm: fit.gradient_norm,
        })
        .map_err(|e| match e {
            FitError::NoEvents(_) => FitError::NoEvents(arm),
            other => other,
        })
}

pub(crate) struct CoxFit {
    pub beta: Vec<f64>,
    pub baseline: StepFunction,
    pub gradient_norm: f64,
}

/// Breslow-tie partial likelihood maximization plus Breslow baseline.
pub(crate) fn fit_cox_data(
    times: &[f64],
    events: &[bool],
    covariates: &[&[f64]],
    features: &FeatureMap,
) -> Result<CoxFit, FitError> {
    let n = times.len();
    let k = features.dim();
    if !events.iter().any(|&e| e) {
        return Err(FitError::NoEvents(Arm::Control));
    }
    // Centered design, row-major.
    let mut z = Vec::with_capacity(n * k);
    for x in covariates {
        z.extend(features.terms().iter().map(|t| t.eval(x)));
    }
    let mut center = vec![0.0; k];
    for i in 0..n {
        for a in 0..k {
            center[a] += z[i * k + a];
        }
    }
    center.iter_mut().for_each(|c| *c /= n as f64);
    for i in 0..n {
        for a in 0..k {
            z[i * k + a] -= center[a];
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    // Tie groups in descending time order: (start, end) into `order`.
    let mut groups = Vec::new();
    let mut s = 0;
    while s < n {
        let mut e = s + 1;
        while e < n && times[order[e]] == times[order[s]] {
            e += 1;
        }
        groups.push((s, e));
        s = e;
    }
    let row = |i: usize| &z[i * k..(i + 1) * k];

    let outcome = newton::maximize(vec![0.0; k], |beta| {
        let mut value = 0.0;
        let mut gradient = DVector::zeros(k);
        let mut hessian = DMatrix::zeros(k, k);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k * k];
        for &(gs, ge) in &groups {
            for &i in &order[gs..ge] {
                let zi = row(i);
                let w = zi.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp();
                s0 += w;
                for a in 0..k {
                    s1[a] += w * zi[a];
                    for b in 0..=a {
                        s2[a * k + b] += w * zi[a] * zi[b];
                    }
                }
            }
            let mut d = 0.0;
            for &i in &order[gs..ge] {
                if events[i] {
                    d += 1.0;
                    let zi = row(i);
                    value += zi.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
                    for a in 0..k {
                        gradient[a] += zi[a];
                    }
                }
            }
            if d > 0.0 {
                value -= d * s0.ln();
                for a in 0..k {
                    let ma = s1[a] / s0;
                    gradient[a] -= d * ma;
                    for b in 0..=a {
                        hessian[(a, b)] -= d * (s2[a * k + b] / s0 - ma * s1[b] / s0);
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hessian[(b, a)] = hessian[(a, b)];
            }
        }
        Evaluation {
            value,
            gradient,
            hessian,
        }
    })?;

    let beta = outcome.params;
    let n_events = events.iter().filter(|&&e| e).count() as f64;
    let spread = (0..n)
        .map(|i| row(i).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0_f64, f64::max);
    if outcome.min_information < 1e-7 * n_events && spread > 5.0 {
        return Err(FitError::Separation);
    }

    // Breslow increments, ascending time.
    let offset: f64 = center.iter().zip(&beta).map(|(c, b)| c * b).sum();
    let mut knots = Vec::new();
    let mut jumps = Vec::new();
    let mut s0 = 0.0;
    for &(gs, ge) in &groups {
        let mut d = 0.0;
        for &i in &order[gs..ge] {
            s0 += row(i).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().exp();
            if events[i] {
                d += 1.0;
            }
        }
        if d > 0.0 {
            knots.push(times[order[gs]]);
            jumps.push(d / (s0 * offset.exp()));
        }
    }
    knots.reverse();
    jumps.reverse();
    let mut cumulative = 0.0;
    let values = jumps
        .iter()
        .map(|j| {
            cumulative += j;
            cumulative
        })
        .collect();
    Ok(CoxFit {
        beta,
        baseline: StepFunction::from_sorted(knots, values, 0.0),
        gradient_norm: outcome.gradient_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceRecord;

    fn record(x: f64, arm: Arm, time: f64, event: bool) -> SourceRecord {
        SourceRecord {
            x: vec![x],
            arm,
            time,
            event,
        }
    }

    fn sample(rows: &[(f64, f64, bool)]) -> SourceSample {
        let mut recs: Vec<_> = rows
            .iter()
            .map(|&(x, t, e)| record(x, Arm::Treated, t, e))
            .collect();
        recs.push(record(0.0, Arm::Control, 1.0, true));
        SourceSample::new(recs).unwrap()
    }

    #[test]
    fn covariate_free_reduces_to_nelson_aalen() {
        let s = sample(&[
            (0.0, 1.0, true),
            (0.0, 2.0, false),
            (0.0, 2.0, true),
            (0.0, 3.0, true),
            (0.0, 3.0, true),
            (0.0, 5.0, false),
        ]);
        let m = fit_cox(&s, Arm::Treated, EventSource::Outcome, &FeatureMap::identity(1)).unwrap();
        assert_eq!(m.beta(), &[0.0]);
        let h = m.baseline_cumulative_hazard();
        assert_eq!(h.knots(), &[1.0, 2.0, 3.0]);
        let na = [1.0 / 6.0, 1.0 / 6.0 + 1.0 / 5.0, 1.0 / 6.0 + 1.0 / 5.0 + 2.0 / 3.0];
        for (v, e) in h.values().iter().zip(na) {
            assert_eq!(*v, e);
        }
        let surv = CoxSurvival::new(
            fit_cox(&s, Arm::Control, EventSource::Outcome, &FeatureMap::identity(1)).unwrap(),
            m,
        );
        assert_eq!(surv.survival(0.0, Arm::Treated, &[0.0]), 1.0);
        assert_eq!(surv.survival(2.5, Arm::Treated, &[0.0]), (-na[1]).exp());
        assert_eq!(surv.survival(99.0, Arm::Treated, &[0.0]), (-na[2]).exp());
    }

    #[test]
    fn censoring_model_uses_complementary_events() {
        let s = sample(&[(0.0, 1.0, true), (0.0, 2.0, false), (0.0, 4.0, false)]);
        let m = fit_cox(&s, Arm::Treated, EventSource::Censoring, &FeatureMap::empty(1)).unwrap();
        let h = m.baseline_cumulative_hazard();
        assert_eq!(h.knots(), &[2.0, 4.0]);
        assert_eq!(h.values(), &[0.5, 1.5]);
    }

    #[test]
    fn no_events_and_monotone_likelihood() {
        let s = sample(&[(0.0, 1.0, true), (1.0, 2.0, true)]);
        assert_eq!(
            fit_cox(&s, Arm::Treated, EventSource::Censoring, &FeatureMap::identity(1)),
            Err(FitError::NoEvents(Arm::Treated))
        );
        // Two events at times (1, 2) with covariates (0, 1): the partial
        // likelihood 1 / (1 + e^beta) has no finite maximizer.
        assert_eq!(
            fit_cox(&s, Arm::Treated, EventSource::Outcome, &FeatureMap::identity(1)),
            Err(FitError::Separation)
        );
    }

    #[test]
    fn weighted_sum_matches_curve() {
        let s = sample(&[
            (0.3, 1.0, true),
            (-0.2, 2.0, false),
            (1.1, 2.5, true),
            (0.0, 3.0, true),
            (0.7, 3.5, true),
            (-1.0, 4.0, true),
        ]);
        let m = fit_cox(&s, Arm::Treated, EventSource::Outcome, &FeatureMap::identity(1)).unwrap();
        let c = fit_cox(&s, Arm::Control, EventSource::Outcome, &FeatureMap::empty(1)).unwrap();
        let surv = CoxSurvival::new(c, m);
        let times = [0.0, 0.5, 1.0, 2.5, 2.7, 3.5, 9.0];
        let weights = [0.5, 0.5, 1.5, 0.2, 0.8, 5.5, 1.0];
        let direct: f64 = times
            .iter()
            .zip(&weights)
            .map(|(t, w)| w * surv.survival(*t, Arm::Treated, &[0.4]))
            .sum();
        let fast = surv.weighted_sum(Arm::Treated, &[0.4], &times, &weights);
        assert!((direct - fast).abs() < 1e-14);
    }
}
