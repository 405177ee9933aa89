//! Damped Newton-Raphson for smooth concave log-likelihoods.

use nalgebra::{DMatrix, DVector};

use super::FitError;

pub(crate) const GRADIENT_TOLERANCE: f64 = 1e-8;
pub(crate) const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 50;

/// Log-likelihood value, score and Hessian at a parameter vector.
pub(crate) struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub params: Vec<f64>,
    pub gradient_norm: f64,
    /// Smallest eigenvalue of the observed information at the solution.
    pub min_information: f64,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn min_eigenvalue(info: &DMatrix<f64>) -> f64 {
    if info.nrows() == 0 {
        return f64::INFINITY;
    }
    info.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Maximizes a concave objective from `start`.
///
/// Converges when the score sup-norm drops below `1e-8`, or when the Newton
/// decrement is below floating-point resolution of the objective (large
/// weighted fits whose score cannot be resolved to `1e-8` in absolute terms).
pub(crate) fn maximize(
    start: Vec<f64>,
    mut objective: impl FnMut(&[f64]) -> Evaluation,
) -> Result<NewtonOutcome, FitError> {
    let mut params = DVector::from_vec(start);
    let mut eval = objective(params.as_slice());
    if !eval.value.is_finite() {
        return Err(FitError::NonFiniteObjective);
    }
    for iteration in 0..=MAX_ITERATIONS {
        let gnorm = sup_norm(&eval.gradient);
        let info = -&eval.hessian;
        if gnorm <= GRADIENT_TOLERANCE {
            return Ok(NewtonOutcome {
                params: params.as_slice().to_vec(),
                gradient_norm: gnorm,
                min_information: min_eigenvalue(&info),
            });
        }
        if iteration == MAX_ITERATIONS {
            break;
        }
        let chol = info.clone().cholesky().ok_or(FitError::SingularHessian)?;
        let step = chol.solve(&eval.gradient);
        let decrement = eval.gradient.dot(&step);
        if decrement <= 1e-20 * (1.0 + eval.value.abs()) {
            return Ok(NewtonOutcome {
                params: params.as_slice().to_vec(),
                gradient_norm: gnorm,
                min_information: min_eigenvalue(&info),
            });
        }
        let slack = 1e-12 * (1.0 + eval.value.abs());
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &params + &step * scale;
            let next = objective(candidate.as_slice());
            if next.value.is_finite() && next.value >= eval.value - slack {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((p, e)) => {
                params = p;
                eval = e;
            }
            None => {
                return Err(FitError::NonConvergence {
                    iterations: iteration + 1,
                })
            }
        }
    }
    Err(FitError::NonConvergence {
        iterations: MAX_ITERATIONS,
    })
}
