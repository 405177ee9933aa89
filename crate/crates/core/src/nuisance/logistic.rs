use nalgebra::{DMatrix, DVector};

use super::newton::{self, Evaluation};
use super::{expit, FitError, ProbabilityModel};
use crate::features::FeatureMap;

/// Logistic regression `logit P(y = 1 | x) = theta . (1, g(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    features: FeatureMap,
    /// Intercept first.
    coefficients: Vec<f64>,
    gradient_norm: f64,
}

impl LogisticModel {
    pub fn from_coefficients(features: FeatureMap, coefficients: Vec<f64>) -> Result<Self, FitError> {
        if coefficients.len() != features.dim() + 1 {
            return Err(FitError::DimensionMismatch {
                expected: features.dim() + 1,
                found: coefficients.len(),
            });
        }
        Ok(Self {
            features,
            coefficients,
            gradient_norm: 0.0,
        })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// Score sup-norm at the fitted coefficients.
    pub fn gradient_norm(&self) -> f64 {
        self.gradient_norm
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.coefficients[0]
            + self
                .features
                .terms()
                .iter()
                .zip(&self.coefficients[1..])
                .map(|(t, c)| c * t.eval(x))
                .sum::<f64>()
    }

    /// `expit(theta . (1, g(x)))` with a dimension check.
    pub fn predict(&self, x: &[f64]) -> Result<f64, FitError> {
        if x.len() != self.features.input_dim() {
            return Err(FitError::DimensionMismatch {
                expected: self.features.input_dim(),
                found: x.len(),
            });
        }
        Ok(expit(self.linear_predictor(x)))
    }
}

impl ProbabilityModel for LogisticModel {
    fn probability(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }
}

/// Weighted maximum-likelihood logistic regression by Newton-Raphson.
pub fn fit_logistic(
    features: &FeatureMap,
    covariates: &[&[f64]],
    labels: &[bool],
    weights: Option<&[f64]>,
) -> Result<LogisticModel, FitError> {
    let n = covariates.len();
    if labels.len() != n {
        return Err(FitError::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(FitError::DimensionMismatch {
                expected: n,
                found: w.len(),
            });
        }
        if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(FitError::InvalidWeights);
        }
    }
    if let Some(x) = covariates.iter().find(|x| x.len() != features.input_dim()) {
        return Err(FitError::DimensionMismatch {
            expected: features.input_dim(),
            found: x.len(),
        });
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(FitError::SingleClass);
    }
    let k = features.dim() + 1;
    let mut design = Vec::with_capacity(n * k);
    for x in covariates {
        design.push(1.0);
        design.extend(features.terms().iter().map(|t| t.eval(x)));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total_weight: f64 = (0..n).map(weight).sum();
    let mean = (0..n)
        .filter(|&i| labels[i])
        .map(weight)
        .sum::<f64>()
        / total_weight;
    let mut start = vec![0.0; k];
    start[0] = (mean / (1.0 - mean)).ln();

    let outcome = newton::maximize(start, |theta| {
        let mut value = 0.0;
        let mut gradient = DVector::zeros(k);
        let mut hessian = DMatrix::zeros(k, k);
        for i in 0..n {
            let row = &design[i * k..(i + 1) * k];
            let eta: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
            let w = weight(i);
            let y = if labels[i] { 1.0 } else { 0.0 };
            // log(1 + e^eta) computed stably
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            value += w * (y * eta - softplus);
            let p = expit(eta);
            let r = w * (y - p);
            let v = w * p * (1.0 - p);
            for a in 0..k {
                gradient[a] += r * row[a];
                for b in 0..=a {
                    hessian[(a, b)] -= v * row[a] * row[b];
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
    })
    .map_err(|e| match e {
        FitError::SingularHessian | FitError::NonConvergence { .. } if separated(&design, k, labels) => {
            FitError::Separation
        }
        other => other,
    })?;

    let coef_norm = outcome.params.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if outcome.min_information < 1e-7 * total_weight || coef_norm > 1e3 {
        return Err(FitError::Separation);
    }
    Ok(LogisticModel {
        features: features.clone(),
        coefficients: outcome.params,
        gradient_norm: outcome.gradient_norm,
    })
}

/// Whether the current data admit a perfectly separating direction along
/// any single design column (a cheap sufficient check used to classify
/// numerical failures).
fn separated(design: &[f64], k: usize, labels: &[bool]) -> bool {
    (1..k).any(|c| {
        let col = |i: usize| design[i * k + c];
        let (mut max0, mut min0, mut max1, mut min1) =
            (f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
        for (i, &label) in labels.iter().enumerate() {
            let v = col(i);
            if label {
                max1 = max1.max(v);
                min1 = min1.min(v);
            } else {
                max0 = max0.max(v);
                min0 = min0.min(v);
            }
        }
        max0 <= min1 || max1 <= min0
    })
}
