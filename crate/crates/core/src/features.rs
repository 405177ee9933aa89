//! Covariate transforms used by working models and calibration moments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("cannot parse feature term `{0}`")]
    Parse(String),
    #[error("feature term `{term}` refers to covariate {index} but only {p} exist")]
    OutOfRange { term: String, index: usize, p: usize },
}

/// One derived feature of a covariate vector. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Linear(usize),
    Exp(usize),
    Square(usize),
    Product(usize, usize),
}

impl Term {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Linear(j) => x[j],
            Term::Exp(j) => x[j].exp(),
            Term::Square(j) => x[j] * x[j],
            Term::Product(j, k) => x[j] * x[k],
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            Term::Linear(j) | Term::Exp(j) | Term::Square(j) => j,
            Term::Product(j, k) => j.max(k),
        }
    }
}

fn parse_var(s: &str) -> Option<usize> {
    let idx: usize = s.trim().strip_prefix('x')?.parse().ok()?;
    idx.checked_sub(1)
}

impl FromStr for Term {
    type Err = FeatureError;

    /// Accepts `x3`, `exp(x1)`, `x2^2` and `x1*x3` (one-based names).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let err = || FeatureError::Parse(s.to_string());
        if let Some(inner) = t.strip_prefix("exp(").and_then(|r| r.strip_suffix(')')) {
            return parse_var(inner).map(Term::Exp).ok_or_else(err);
        }
        if let Some(base) = t.strip_suffix("^2") {
            return parse_var(base).map(Term::Square).ok_or_else(err);
        }
        if let Some((a, b)) = t.split_once('*') {
            let (a, b) = (parse_var(a).ok_or_else(err)?, parse_var(b).ok_or_else(err)?);
            return Ok(if a == b {
                Term::Square(a)
            } else {
                Term::Product(a.min(b), a.max(b))
            });
        }
        parse_var(t).map(Term::Linear).ok_or_else(err)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Term::Linear(j) => write!(f, "x{}", j + 1),
            Term::Exp(j) => write!(f, "exp(x{})", j + 1),
            Term::Square(j) => write!(f, "x{}^2", j + 1),
            Term::Product(j, k) => write!(f, "x{}*x{}", j + 1, k + 1),
        }
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered list of terms mapping `x in R^p` to `g(x) in R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    terms: Vec<Term>,
    input_dim: usize,
}

impl FeatureMap {
    pub fn new(terms: Vec<Term>, input_dim: usize) -> Result<Self, FeatureError> {
        for t in &terms {
            if t.max_index() >= input_dim {
                return Err(FeatureError::OutOfRange {
                    term: t.to_string(),
                    index: t.max_index() + 1,
                    p: input_dim,
                });
            }
        }
        Ok(Self { terms, input_dim })
    }

    pub fn parse(specs: &[impl AsRef<str>], input_dim: usize) -> Result<Self, FeatureError> {
        let terms = specs
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<Term>, _>>()?;
        Self::new(terms, input_dim)
    }

    /// `g(x) = x`.
    pub fn identity(p: usize) -> Self {
        Self {
            terms: (0..p).map(Term::Linear).collect(),
            input_dim: p,
        }
    }

    /// `g(x) = (e^{x_1}, ..., e^{x_p})`.
    pub fn exponential(p: usize) -> Self {
        Self {
            terms: (0..p).map(Term::Exp).collect(),
            input_dim: p,
        }
    }

    /// The empty map (intercept-only models).
    pub fn empty(p: usize) -> Self {
        Self {
            terms: Vec::new(),
            input_dim: p,
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.input_dim);
        out.clear();
        out.extend(self.terms.iter().map(|t| t.eval(x)));
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }

    /// Row-major `n x k` design of mapped features.
    pub fn design<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<Vec<f64>> {
        rows.into_iter().map(|x| self.apply(x)).collect()
    }
}

/// Which raw moments of `X` to calibrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentOrder {
    First,
    #[serde(alias = "first2")]
    FirstAndSecond,
}

impl FromStr for MomentOrder {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "first" => Ok(MomentOrder::First),
            "first2" | "first_and_second" => Ok(MomentOrder::FirstAndSecond),
            other => Err(FeatureError::Parse(other.to_string())),
        }
    }
}

/// Calibration moment specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSpec {
    /// Raw moments; `None` calibrates only on `transforms`.
    pub order: Option<MomentOrder>,
    #[serde(default)]
    pub include_interactions: bool,
    #[serde(default)]
    pub transforms: Vec<Term>,
}

impl Default for MomentSpec {
    fn default() -> Self {
        Self {
            order: Some(MomentOrder::FirstAndSecond),
            include_interactions: false,
            transforms: Vec::new(),
        }
    }
}

impl MomentSpec {
    pub fn first() -> Self {
        Self {
            order: Some(MomentOrder::First),
            ..Self::default()
        }
    }

    pub fn first_and_second() -> Self {
        Self::default()
    }

    pub fn transforms_only(transforms: Vec<Term>) -> Self {
        Self {
            order: None,
            include_interactions: false,
            transforms,
        }
    }

    pub fn feature_map(&self, p: usize) -> Result<FeatureMap, FeatureError> {
        let mut terms = Vec::new();
        if let Some(order) = self.order {
            terms.extend((0..p).map(Term::Linear));
            if order == MomentOrder::FirstAndSecond {
                terms.extend((0..p).map(Term::Square));
            }
        }
        if self.include_interactions {
            for j in 0..p {
                for k in j + 1..p {
                    terms.push(Term::Product(j, k));
                }
            }
        }
        for t in &self.transforms {
            if !terms.contains(t) {
                terms.push(*t);
            }
        }
        if terms.is_empty() {
            return Err(FeatureError::Parse("empty moment specification".into()));
        }
        FeatureMap::new(terms, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_terms() {
        assert_eq!("x1".parse::<Term>().unwrap(), Term::Linear(0));
        assert_eq!("exp(x3)".parse::<Term>().unwrap(), Term::Exp(2));
        assert_eq!("x2^2".parse::<Term>().unwrap(), Term::Square(1));
        assert_eq!("x3*x1".parse::<Term>().unwrap(), Term::Product(0, 2));
        assert_eq!("x2*x2".parse::<Term>().unwrap(), Term::Square(1));
        assert!("y1".parse::<Term>().is_err());
        assert!("x0".parse::<Term>().is_err());
        for s in ["x1", "exp(x3)", "x2^2", "x1*x3"] {
            assert_eq!(s.parse::<Term>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn moment_spec_maps() {
        let m = MomentSpec::first_and_second().feature_map(2).unwrap();
        assert_eq!(m.apply(&[2.0, 3.0]), vec![2.0, 3.0, 4.0, 9.0]);
        let inter = MomentSpec {
            order: Some(MomentOrder::First),
            include_interactions: true,
            transforms: vec![Term::Exp(0)],
        };
        let m = inter.feature_map(2).unwrap();
        assert_eq!(m.apply(&[0.0, 3.0]), vec![0.0, 3.0, 0.0, 1.0]);
        assert!(MomentSpec::transforms_only(vec![]).feature_map(2).is_err());
        assert!(FeatureMap::parse(&["x3"], 2).is_err());
    }
}
