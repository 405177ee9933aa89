//! Nuisance models: treatment and sampling scores, outcome and censoring
//! survival.
//!
//! Parametric working models are logistic regression and Cox proportional
//! hazards with Breslow baselines. Nonparametric alternatives are
//! Nadaraya-Watson class-probability smoothers and Beran conditional
//! product-limit estimators. Every fitted model is immutable and `Send + Sync`.

use std::fmt::Debug;

use thiserror::Error;

use crate::data::Arm;
use crate::step::StepFunction;

pub mod cox;
pub mod kernel;
pub mod logistic;
mod newton;

pub use cox::{fit_cox, CoxModel, CoxSurvival, EventSource};
pub use kernel::{fit_kernel_logistic, fit_kernel_survival, KernelLogistic, KernelSurvival, DEFAULT_MIN_NEIGHBOURS};
pub use logistic::{fit_logistic, LogisticModel};

/// Floor for treatment propensities and sampling scores used as denominators.
pub const PROPENSITY_FLOOR: f64 = 0.01;
/// Floor for sampling scores (they are small by construction, see
/// [`crate::estimators`]).
pub const SAMPLING_SCORE_FLOOR: f64 = 1e-4;
/// Floor for censoring survival used as a denominator.
pub const CENSORING_FLOOR: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("likelihood is unbounded (separated data)")]
    Separation,
    #[error("Hessian is singular")]
    SingularHessian,
    #[error("Newton iterations did not converge after {iterations} steps")]
    NonConvergence { iterations: usize },
    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,
    #[error("arm {0} has no subjects")]
    EmptyArm(Arm),
    #[error("arm {0} has no events of the requested kind")]
    NoEvents(Arm),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("weights must be positive and finite")]
    InvalidWeights,
    #[error("bandwidth must be positive")]
    InvalidBandwidth,
    #[error("no training points carry kernel weight at the query point")]
    DegenerateNeighborhood,
}

/// A probability as a function of covariates (propensity or sampling score).
pub trait ProbabilityModel: Send + Sync + Debug {
    fn probability(&self, x: &[f64]) -> f64;
}

/// Conditional survival `S(t | a, x)`.
pub trait SurvivalModel: Send + Sync + Debug {
    /// The full curve for `(a, x)`: right-continuous, equal to one before
    /// the first knot, nonincreasing.
    fn curve(&self, arm: Arm, x: &[f64]) -> StepFunction;

    fn survival(&self, t: f64, arm: Arm, x: &[f64]) -> f64 {
        self.curve(arm, x).eval(t)
    }

    /// `sum_k w_k S(t_k | a, x)` for an ascending grid.
    fn weighted_sum(&self, arm: Arm, x: &[f64], times: &[f64], weights: &[f64]) -> f64 {
        let curve = self.curve(arm, x);
        curve
            .sample_sorted(times)
            .iter()
            .zip(weights)
            .map(|(s, w)| s * w)
            .sum()
    }
}

/// A probability that ignores the covariates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantProbability(pub f64);

impl ProbabilityModel for ConstantProbability {
    fn probability(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// The same survival curve per arm for every covariate value.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedSurvival {
    curves: [StepFunction; 2],
}

impl FixedSurvival {
    pub fn new(control: StepFunction, treated: StepFunction) -> Self {
        Self {
            curves: [control, treated],
        }
    }

    /// `S(t) = value` for all `t`, both arms.
    pub fn constant(value: f64) -> Self {
        Self::new(StepFunction::constant(value), StepFunction::constant(value))
    }
}

impl SurvivalModel for FixedSurvival {
    fn curve(&self, arm: Arm, _x: &[f64]) -> StepFunction {
        self.curves[arm.index()].clone()
    }
}

pub(crate) fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
