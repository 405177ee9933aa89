//! Right-continuous piecewise-constant functions of time.
//!
//! Cumulative baseline hazards, conditional survival curves and estimated
//! value curves are all represented by [`StepFunction`].

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("knots and values differ in length ({knots} vs {values})")]
    LengthMismatch { knots: usize, values: usize },
    #[error("knots must be strictly increasing (violation at index {index})")]
    NotIncreasing { index: usize },
    #[error("step function contains a non-finite entry")]
    NonFinite,
}

/// A right-continuous step function.
///
/// The function equals `before` on `(-inf, knots[0])` and `values[i]` on
/// `[knots[i], knots[i + 1])`. Beyond the last knot it stays at the last value.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    before: f64,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, before: f64) -> Result<Self, StepError> {
        if knots.len() != values.len() {
            return Err(StepError::LengthMismatch {
                knots: knots.len(),
                values: values.len(),
            });
        }
        if !before.is_finite() || knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(StepError::NonFinite);
        }
        if let Some(index) = knots.windows(2).position(|w| w[1] <= w[0]) {
            return Err(StepError::NotIncreasing { index: index + 1 });
        }
        Ok(Self {
            knots,
            values,
            before,
        })
    }

    /// Builds a step function without validation. Callers guarantee strictly
    /// increasing knots.
    pub(crate) fn from_sorted(knots: Vec<f64>, values: Vec<f64>, before: f64) -> Self {
        debug_assert_eq!(knots.len(), values.len());
        debug_assert!(knots.windows(2).all(|w| w[0] < w[1]));
        Self {
            knots,
            values,
            before,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            knots: Vec::new(),
            values: Vec::new(),
            before: value,
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_before_first(&self) -> f64 {
        self.before
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Value at `t` (right-continuous).
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k <= t);
        if idx == 0 {
            self.before
        } else {
            self.values[idx - 1]
        }
    }

    /// Left limit `f(t-)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k < t);
        if idx == 0 {
            self.before
        } else {
            self.values[idx - 1]
        }
    }

    /// Value of the last step (or the initial value when there are no knots).
    pub fn last_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(self.before)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> StepFunction {
        StepFunction {
            knots: self.knots.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            before: f(self.before),
        }
    }

    /// Evaluates the function on an ascending grid in one merge pass.
    pub fn sample_sorted(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        let mut j = 0;
        let mut current = self.before;
        for &t in grid {
            while j < self.knots.len() && self.knots[j] <= t {
                current = self.values[j];
                j += 1;
            }
            out.push(current);
        }
        out
    }

    /// Exact integral over `[lower, upper]`.
    pub fn integral(&self, lower: f64, upper: f64) -> f64 {
        if upper <= lower {
            return 0.0;
        }
        let mut total = 0.0;
        let mut left = lower;
        let mut current = self.eval(lower);
        let start = self.knots.partition_point(|&k| k <= lower);
        for j in start..self.knots.len() {
            let k = self.knots[j];
            if k >= upper {
                break;
            }
            total += (k - left) * current;
            left = k;
            current = self.values[j];
        }
        total + (upper - left) * current
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StepFunction {
        StepFunction::new(vec![1.0, 2.0, 4.0], vec![0.8, 0.5, 0.1], 1.0).unwrap()
    }

    #[test]
    fn evaluation_is_right_continuous() {
        let f = sample();
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(1.0), 0.8);
        assert_eq!(f.left_limit(1.0), 1.0);
        assert_eq!(f.eval(3.999), 0.5);
        assert_eq!(f.eval(4.0), 0.1);
        assert_eq!(f.eval(100.0), 0.1);
    }

    #[test]
    fn rejects_bad_knots() {
        assert_eq!(
            StepFunction::new(vec![1.0, 1.0], vec![0.0, 0.0], 0.0),
            Err(StepError::NotIncreasing { index: 1 })
        );
        assert!(matches!(
            StepFunction::new(vec![1.0], vec![], 0.0),
            Err(StepError::LengthMismatch { .. })
        ));
        assert_eq!(
            StepFunction::new(vec![1.0], vec![f64::NAN], 0.0),
            Err(StepError::NonFinite)
        );
    }

    #[test]
    fn integral_matches_hand_computation() {
        let f = sample();
        // 1*1 + 0.8*1 + 0.5*2 + 0.1*1
        assert!((f.integral(0.0, 5.0) - 2.9).abs() < 1e-15);
        assert!((f.integral(1.5, 2.5) - (0.4 + 0.25)).abs() < 1e-15);
        assert_eq!(f.integral(3.0, 3.0), 0.0);
    }

    #[test]
    fn sample_sorted_agrees_with_eval() {
        let f = sample();
        let grid = [0.0, 1.0, 1.5, 2.0, 3.0, 4.0, 9.0];
        let sampled = f.sample_sorted(&grid);
        for (t, v) in grid.iter().zip(sampled) {
            assert_eq!(f.eval(*t), v);
        }
    }
}
