//! Entropy-balancing calibration weights.
//!
//! Minimizes `sum q_i log q_i` over the source sample subject to
//! `sum q_i = 1` and `sum q_i g(X_i) = g~`, where `g~` is the design-weighted
//! target mean of `g`. The solution has the log-linear form
//! `q_i ∝ exp(lambda . g(X_i))` and is found through the convex dual
//! `min_lambda log sum_i exp(lambda . (g(X_i) - g~))`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{SourceSample, TargetSample};
use crate::features::FeatureMap;
use crate::nuisance::ProbabilityModel;

const DUAL_TOLERANCE: f64 = 1e-11;
const MAX_NEWTON: usize = 100;
const MAX_GRADIENT_STEPS: usize = 200;
const DIVERGENCE_NORM: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("target moments lie outside the convex hull of the source features")]
    Infeasible,
    #[error("calibration dual did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("cannot calibrate an empty sample")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Design-weighted (normalized) mean of `g(X)` over the target sample.
pub fn target_moments(target: &TargetSample, map: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; map.dim()];
    let mut total = 0.0;
    for r in target.records() {
        total += r.design_weight;
        for (o, t) in out.iter_mut().zip(map.terms()) {
            *o += r.design_weight * t.eval(&r.x);
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Solved calibration problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationWeights {
    q: Vec<f64>,
    lambda: Vec<f64>,
    target_moments: Vec<f64>,
    features: FeatureMap,
    /// `log sum_i exp(lambda . g(X_i))` over the fitting sample.
    log_normalizer: f64,
    iterations: usize,
}

impl CalibrationWeights {
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Dual coefficients on the raw feature scale.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn target_moments(&self) -> &[f64] {
        &self.target_moments
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `lambda . g(x)`.
    pub fn log_score(&self, x: &[f64]) -> f64 {
        self.features
            .terms()
            .iter()
            .zip(&self.lambda)
            .map(|(t, l)| l * t.eval(x))
            .sum()
    }

    /// Weights on another sample through the dual form, renormalized to sum
    /// to one.
    pub fn weights_for<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
        softmax(rows.into_iter().map(|x| self.log_score(x)).collect())
    }

    /// `sup_j |sum_i q_i g_j(X_i) - g~_j|` on the fitting sample.
    pub fn constraint_residual(&self, source: &SourceSample) -> f64 {
        let mut r = vec![0.0; self.features.dim()];
        for (rec, q) in source.records().iter().zip(&self.q) {
            for (rj, t) in r.iter_mut().zip(self.features.terms()) {
                *rj += q * t.eval(&rec.x);
            }
        }
        r.iter()
            .zip(&self.target_moments)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn entropy(&self) -> f64 {
        self.q.iter().map(|q| q * q.ln()).sum()
    }

    /// `x -> 1 / (N_hat q(x))`, the sampling score implied by the weights.
    pub fn implied_sampling_score(&self, n_hat: f64) -> ImpliedSamplingScore {
        ImpliedSamplingScore {
            weights: self.clone(),
            n_hat,
        }
    }
}

/// Diagnostic sampling score implied by calibration weights.
#[derive(Debug, Clone)]
pub struct ImpliedSamplingScore {
    weights: CalibrationWeights,
    n_hat: f64,
}

impl ProbabilityModel for ImpliedSamplingScore {
    fn probability(&self, x: &[f64]) -> f64 {
        let q = (self.weights.log_score(x) - self.weights.log_normalizer).exp();
        1.0 / (self.n_hat * q)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

fn softmax(v: Vec<f64>) -> Vec<f64> {
    let lse = log_sum_exp(&v);
    v.into_iter().map(|a| (a - lse).exp()).collect()
}

/// Solves the entropy-balancing problem on `source` for features `map`.
pub fn solve_calibration(
    source: &SourceSample,
    target_moments: &[f64],
    map: &FeatureMap,
) -> Result<CalibrationWeights, CalibrationError> {
    let rows: Vec<&[f64]> = source.records().iter().map(|r| r.x.as_slice()).collect();
    solve_calibration_rows(&rows, target_moments, map)
}

pub(crate) fn solve_calibration_rows(
    rows: &[&[f64]],
    target: &[f64],
    map: &FeatureMap,
) -> Result<CalibrationWeights, CalibrationError> {
    let n = rows.len();
    let k = map.dim();
    if n == 0 {
        return Err(CalibrationError::Empty);
    }
    if target.len() != k {
        return Err(CalibrationError::DimensionMismatch {
            expected: k,
            found: target.len(),
        });
    }
    let g: Vec<Vec<f64>> = rows.iter().map(|x| map.apply(x)).collect();

    // Standardize by source moments; drop features that are constant at the
    // target value, reject those constant elsewhere or with the target on or
    // outside the range of the data.
    let mut active = Vec::new();
    let mut spread = vec![1.0; k];
    for j in 0..k {
        let (lo, hi) = g
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        if lo == hi {
            if (target[j] - lo).abs() <= 1e-12 * (1.0 + lo.abs()) {
                continue;
            }
            return Err(CalibrationError::Infeasible);
        }
        if target[j] <= lo || target[j] >= hi {
            return Err(CalibrationError::Infeasible);
        }
        let mean = g.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = g.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        spread[j] = var.sqrt();
        active.push(j);
    }
    let d = active.len();
    let mut h = Vec::with_capacity(n * d);
    for r in &g {
        h.extend(active.iter().map(|&j| (r[j] - target[j]) / spread[j]));
    }
    let hrow = |i: usize| &h[i * d..(i + 1) * d];

    struct Dual {
        value: f64,
        q: Vec<f64>,
        gradient: DVector<f64>,
    }
    let evaluate = |mu: &DVector<f64>| -> Dual {
        let scores: Vec<f64> = (0..n)
            .map(|i| hrow(i).iter().zip(mu.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let value = log_sum_exp(&scores);
        let q: Vec<f64> = scores.iter().map(|s| (s - value).exp()).collect();
        let mut gradient = DVector::zeros(d);
        for (i, qi) in q.iter().enumerate() {
            for (a, ha) in hrow(i).iter().enumerate() {
                gradient[a] += qi * ha;
            }
        }
        Dual { value, q, gradient }
    };
    let hessian = |dual: &Dual| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(d, d);
        for (i, qi) in dual.q.iter().enumerate() {
            let r = hrow(i);
            for a in 0..d {
                for b in 0..=a {
                    m[(a, b)] += qi * r[a] * r[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                m[(a, b)] -= dual.gradient[a] * dual.gradient[b];
                m[(b, a)] = m[(a, b)];
            }
        }
        m
    };
    let sup = |v: &DVector<f64>| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    let mut mu = DVector::zeros(d);
    let mut dual = evaluate(&mu);
    let mut iterations = 0;
    let mut use_gradient = false;
    while sup(&dual.gradient) > DUAL_TOLERANCE {
        if iterations >= MAX_NEWTON + MAX_GRADIENT_STEPS {
            break;
        }
        iterations += 1;
        let newton = if use_gradient || iterations > MAX_NEWTON {
            None
        } else {
            hessian(&dual).cholesky().map(|c| -c.solve(&dual.gradient))
        };
        let direction = match newton {
            Some(step) => step,
            None => {
                use_gradient = true;
                -&dual.gradient
            }
        };
        let slope = dual.gradient.dot(&direction);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &mu + &direction * scale;
            let next = evaluate(&candidate);
            // Near the optimum the dual value stops resolving progress, so a
            // clear drop in the gradient also counts.
            let flat = next.value <= dual.value + 1e-12 * (1.0 + dual.value.abs())
                && sup(&next.gradient) < 0.5 * sup(&dual.gradient);
            if next.value.is_finite() && (next.value <= dual.value + 1e-4 * scale * slope || flat) {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((m, next)) => {
                mu = m;
                dual = next;
            }
            None => break,
        }
        if mu.norm() > DIVERGENCE_NORM {
            return Err(CalibrationError::Infeasible);
        }
    }
    let residual = sup(&dual.gradient);
    if residual > DUAL_TOLERANCE {
        if mu.norm() > DIVERGENCE_NORM {
            return Err(CalibrationError::Infeasible);
        }
        // Accept solutions whose raw-scale residual is still far inside the
        // published tolerance; floating-point noise can stall the last digit.
        let raw = active
            .iter()
            .enumerate()
            .fold(0.0_f64, |m, (a, &j)| m.max((dual.gradient[a] * spread[j]).abs()));
        if raw > 1e-9 {
            return Err(CalibrationError::NonConvergence { residual: raw });
        }
    }
    let mut lambda = vec![0.0; k];
    for (a, &j) in active.iter().enumerate() {
        lambda[j] = mu[a] / spread[j];
    }
    let raw_scores: Vec<f64> = g
        .iter()
        .map(|r| r.iter().zip(&lambda).map(|(a, b)| a * b).sum())
        .collect();
    let log_normalizer = log_sum_exp(&raw_scores);
    Ok(CalibrationWeights {
        q: dual.q,
        lambda,
        target_moments: target.to_vec(),
        features: map.clone(),
        log_normalizer,
        iterations,
    })
}
