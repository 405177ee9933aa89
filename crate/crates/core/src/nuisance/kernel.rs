//! Kernel-smoothed nuisance learners: Beran conditional product-limit
//! survival and Nadaraya-Watson class probabilities.
//!
//! Both use a Gaussian kernel on covariates standardized by the training
//! sample. Weights are computed relative to the nearest training point; a
//! query whose nearest neighbour sits more than [`MAX_SCALED_DISTANCE`]
//! bandwidths away has no usable neighbourhood and falls back to the
//! unsmoothed estimate.
//!
//! Optionally the bandwidth at a query widens to the distance of its `k`-th
//! nearest training point, so sparse regions still average over at least
//! `k` subjects.

// NaN inputs must fail the `!(x > 0)` style checks below.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use super::cox::EventSource;
use super::{FitError, ProbabilityModel, SurvivalModel};
use crate::data::{Arm, SourceSample};
use crate::step::StepFunction;

/// `exp(-d^2 / 2)` underflows to zero beyond this many bandwidths.
pub const MAX_SCALED_DISTANCE: f64 = 37.0;
const PROBABILITY_CLIP: f64 = 1e-6;
/// Neighbourhood floor for class-probability smoothers when none is given.
pub const DEFAULT_MIN_NEIGHBOURS: usize = 25;

/// Rule-of-thumb bandwidth `n^{-1/(p+4)}` on standardized covariates.
pub fn default_bandwidth(n: usize, p: usize) -> f64 {
    (n as f64).powf(-1.0 / (p as f64 + 4.0))
}

#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Self {
        let p = rows.first().map_or(0, |r| r.len());
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                mean[j] += r[j] / n;
            }
        }
        let mut scale = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                scale[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Relative Gaussian kernel weights of `points` at `z`, or `None` when the
/// nearest point is beyond the kernel's numerical support. The squared
/// bandwidth is at least the squared distance to the `min_neighbours`-th
/// nearest point.
fn kernel_weights(points: &[Vec<f64>], z: &[f64], bandwidth: f64, min_neighbours: usize) -> Option<Vec<f64>> {
    let d2: Vec<f64> = points
        .iter()
        .map(|p| p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let nearest = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let mut h2 = bandwidth * bandwidth;
    if min_neighbours > 1 && !d2.is_empty() {
        let mut sorted = d2.clone();
        let idx = min_neighbours.min(sorted.len()) - 1;
        let (_, kth, _) = sorted.select_nth_unstable_by(idx, f64::total_cmp);
        h2 = h2.max(*kth);
    }
    if !((nearest / h2).sqrt() <= MAX_SCALED_DISTANCE) {
        return None;
    }
    Some(d2.iter().map(|d| (-(d - nearest) / (2.0 * h2)).exp()).collect())
}

/// Beran estimator for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelArm {
    standardizer: Standardizer,
    points: Vec<Vec<f64>>,
    /// Ascending observed times with their event flags.
    times: Vec<f64>,
    events: Vec<bool>,
    bandwidth: f64,
    min_neighbours: usize,
    marginal: StepFunction,
}

impl KernelArm {
    fn fit(times: &[f64], events: &[bool], rows: &[&[f64]], bandwidth: f64) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let standardizer = Standardizer::fit(rows);
        let points = order.iter().map(|&i| standardizer.apply(rows[i])).collect();
        let times: Vec<f64> = order.iter().map(|&i| times[i]).collect();
        let events: Vec<bool> = order.iter().map(|&i| events[i]).collect();
        let marginal = product_limit(&times, &events, &vec![1.0; times.len()]);
        Self {
            standardizer,
            points,
            times,
            events,
            bandwidth,
            min_neighbours: 0,
            marginal,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// The arm's Kaplan-Meier curve (the fallback).
    pub fn kaplan_meier(&self) -> &StepFunction {
        &self.marginal
    }

    /// Smoothed curve at `x`, or `DegenerateNeighborhood`.
    pub fn try_curve(&self, x: &[f64]) -> Result<StepFunction, FitError> {
        let z = self.standardizer.apply(x);
        let w = kernel_weights(&self.points, &z, self.bandwidth, self.min_neighbours)
            .ok_or(FitError::DegenerateNeighborhood)?;
        Ok(product_limit(&self.times, &self.events, &w))
    }

    pub fn curve(&self, x: &[f64]) -> StepFunction {
        self.try_curve(x).unwrap_or_else(|_| self.marginal.clone())
    }
}

/// Weighted product-limit estimator over ascending `times`; knots at
/// distinct event times.
fn product_limit(times: &[f64], events: &[bool], weights: &[f64]) -> StepFunction {
    let mut at_risk: f64 = weights.iter().sum();
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut surv = 1.0;
    let mut s = 0;
    while s < times.len() {
        let mut e = s;
        let mut deaths = 0.0;
        let mut group = 0.0;
        let mut any_event = false;
        while e < times.len() && times[e] == times[s] {
            group += weights[e];
            if events[e] {
                deaths += weights[e];
                any_event = true;
            }
            e += 1;
        }
        if any_event {
            if at_risk > 0.0 {
                surv *= (1.0 - deaths / at_risk).max(0.0);
            }
            knots.push(times[s]);
            values.push(surv);
        }
        at_risk -= group;
        s = e;
    }
    StepFunction::from_sorted(knots, values, 1.0)
}

/// Beran survival for both arms.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSurvival {
    arms: [KernelArm; 2],
}

impl KernelSurvival {
    pub fn arm(&self, arm: Arm) -> &KernelArm {
        &self.arms[arm.index()]
    }

    /// Widens the bandwidth at each query to cover at least `k` subjects of
    /// the arm. `k <= 1` disables the floor.
    pub fn with_min_neighbours(mut self, k: usize) -> Self {
        for a in &mut self.arms {
            a.min_neighbours = k;
        }
        self
    }
}

impl SurvivalModel for KernelSurvival {
    fn curve(&self, arm: Arm, x: &[f64]) -> StepFunction {
        self.arms[arm.index()].curve(x)
    }
}

/// Fits arm-specific Beran estimators. `bandwidth = None` uses
/// [`default_bandwidth`] with each arm's size.
pub fn fit_kernel_survival(
    sample: &SourceSample,
    source: EventSource,
    bandwidth: Option<f64>,
) -> Result<KernelSurvival, FitError> {
    if let Some(h) = bandwidth {
        if !(h > 0.0) {
            return Err(FitError::InvalidBandwidth);
        }
    }
    let fit_arm = |arm: Arm| -> Result<KernelArm, FitError> {
        let recs: Vec<_> = sample.records().iter().filter(|r| r.arm == arm).collect();
        if recs.is_empty() {
            return Err(FitError::EmptyArm(arm));
        }
        let times: Vec<f64> = recs.iter().map(|r| r.time).collect();
        let events: Vec<bool> = recs
            .iter()
            .map(|r| match source {
                EventSource::Outcome => r.event,
                EventSource::Censoring => !r.event,
            })
            .collect();
        let rows: Vec<&[f64]> = recs.iter().map(|r| r.x.as_slice()).collect();
        let h = bandwidth.unwrap_or_else(|| default_bandwidth(recs.len(), sample.dim()));
        Ok(KernelArm::fit(&times, &events, &rows, h))
    };
    Ok(KernelSurvival {
        arms: [fit_arm(Arm::Control)?, fit_arm(Arm::Treated)?],
    })
}

/// Nadaraya-Watson estimate of `P(y = 1 | x)`, clipped to `[1e-6, 1 - 1e-6]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLogistic {
    standardizer: Standardizer,
    points: Vec<Vec<f64>>,
    labels: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
    min_neighbours: usize,
    mean: f64,
}

impl KernelLogistic {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// See [`KernelSurvival::with_min_neighbours`].
    pub fn with_min_neighbours(mut self, k: usize) -> Self {
        self.min_neighbours = k;
        self
    }

    pub fn try_probability(&self, x: &[f64]) -> Result<f64, FitError> {
        let z = self.standardizer.apply(x);
        let k = kernel_weights(&self.points, &z, self.bandwidth, self.min_neighbours).ok_or(FitError::DegenerateNeighborhood)?;
        let (mut num, mut den) = (0.0, 0.0);
        for ((ki, wi), yi) in k.iter().zip(&self.weights).zip(&self.labels) {
            num += ki * wi * yi;
            den += ki * wi;
        }
        Ok(clip(num / den))
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)
}

impl ProbabilityModel for KernelLogistic {
    fn probability(&self, x: &[f64]) -> f64 {
        self.try_probability(x).unwrap_or(self.mean)
    }
}

pub fn fit_kernel_logistic(
    covariates: &[&[f64]],
    labels: &[bool],
    weights: Option<&[f64]>,
    bandwidth: Option<f64>,
) -> Result<KernelLogistic, FitError> {
    let n = covariates.len();
    if labels.len() != n {
        return Err(FitError::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if n == 0 || labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(FitError::SingleClass);
    }
    let weights = match weights {
        Some(w) if w.len() != n => {
            return Err(FitError::DimensionMismatch {
                expected: n,
                found: w.len(),
            })
        }
        Some(w) if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) => return Err(FitError::InvalidWeights),
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let p = covariates[0].len();
    let bandwidth = bandwidth.unwrap_or_else(|| default_bandwidth(n, p));
    if !(bandwidth > 0.0) {
        return Err(FitError::InvalidBandwidth);
    }
    let standardizer = Standardizer::fit(covariates);
    let labels: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let total: f64 = weights.iter().sum();
    let mean = clip(labels.iter().zip(&weights).map(|(y, w)| y * w).sum::<f64>() / total);
    Ok(KernelLogistic {
        points: covariates.iter().map(|x| standardizer.apply(x)).collect(),
        standardizer,
        labels,
        weights,
        bandwidth,
        min_neighbours: 0,
        mean,
    })
}
