//! K-fold cross-fitting: nuisances are fit on the complement of each fold
//! and evaluated on the fold, then fold estimates are averaged.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{LinearRule, SourceSample, TargetSample};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorOptions, EvalGrid, ValueEstimate, ValueTable};
use crate::pipeline::{fit_nuisances, ModelSpec};
use crate::policy::{genetic_search, GaConfig, SearchResult};

/// Default number of folds.
pub const DEFAULT_FOLDS: usize = 2;

/// Fold labels (zero-based) for source and target indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    source: Vec<usize>,
    target: Vec<usize>,
    k: usize,
    seed: u64,
}

fn balanced(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut folds = vec![0; len];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// Random balanced partition of both samples into `k` folds.
pub fn make_folds(n: usize, m: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n.min(m) {
        return Err(Error::Config(format!(
            "number of folds must be between 2 and min(n, m) = {}, got {k}",
            n.min(m)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = balanced(n, k, &mut rng);
    rng.set_stream(1);
    let target = balanced(m, k, &mut rng);
    Ok(FoldAssignment { source, target, k, seed })
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_folds(&self) -> &[usize] {
        &self.source
    }

    pub fn target_folds(&self) -> &[usize] {
        &self.target
    }

    fn indices(labels: &[usize], pred: impl Fn(usize) -> bool) -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &f)| pred(f))
            .map(|(i, _)| i)
            .collect()
    }

    /// `(source, target)` indices in fold `k`.
    pub fn fold(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        (
            Self::indices(&self.source, |f| f == k),
            Self::indices(&self.target, |f| f == k),
        )
    }

    /// `(source, target)` indices outside fold `k`.
    pub fn complement(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        (
            Self::indices(&self.source, |f| f != k),
            Self::indices(&self.target, |f| f != k),
        )
    }
}

/// One fold's evaluation table together with the records used to fit its
/// nuisances.
#[derive(Debug, Clone)]
pub struct FoldTable {
    pub table: ValueTable,
    pub fit_source: Vec<usize>,
    pub fit_target: Vec<usize>,
    pub eval_source: Vec<usize>,
    pub eval_target: Vec<usize>,
}

/// Cached fold tables; cheap to evaluate for many rules.
#[derive(Debug, Clone)]
pub struct CrossFitted {
    folds: Vec<FoldTable>,
}

impl CrossFitted {
    /// Fits nuisances once per fold.
    pub fn fit(
        source: &SourceSample,
        target: &TargetSample,
        folds: &FoldAssignment,
        spec: &ModelSpec,
        grid: &EvalGrid,
        options: &EstimatorOptions,
    ) -> Result<Self> {
        if folds.source.len() != source.len() || folds.target.len() != target.len() {
            return Err(Error::Config("fold assignment does not match the sample sizes".into()));
        }
        let folds = (0..folds.k)
            .into_par_iter()
            .map(|k| {
                let wrap = |e: Error| Error::Fold {
                    fold: k + 1,
                    source: Box::new(e),
                };
                let (fit_source, fit_target) = folds.complement(k);
                let (eval_source, eval_target) = folds.fold(k);
                let nuisances = fit_nuisances(
                    &source.subset(&fit_source).map_err(|e| wrap(e.into()))?,
                    &target.subset(&fit_target).map_err(|e| wrap(e.into()))?,
                    spec,
                )
                .map_err(wrap)?;
                let table = ValueTable::build(
                    &source.subset(&eval_source).map_err(|e| wrap(e.into()))?,
                    &target.subset(&eval_target).map_err(|e| wrap(e.into()))?,
                    &nuisances,
                    grid,
                    options,
                    None,
                )
                .map_err(|e| wrap(e.into()))?;
                Ok(FoldTable {
                    table,
                    fit_source,
                    fit_target,
                    eval_source,
                    eval_target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { folds })
    }

    pub fn folds(&self) -> &[FoldTable] {
        &self.folds
    }

    /// Per-fold estimates.
    pub fn fold_estimates(&self, kind: EstimatorKind, rule: &LinearRule) -> Result<Vec<f64>> {
        self.folds
            .iter()
            .map(|f| f.table.estimate(kind, rule).map_err(Error::from))
            .collect()
    }

    /// Average of the fold estimates.
    pub fn value(&self, kind: EstimatorKind, rule: &LinearRule) -> Result<f64> {
        let v = self.fold_estimates(kind, rule)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Averaged estimate with fold influence values concatenated and
    /// rescaled so that `mean(phi^2) / len` is the variance of the average.
    pub fn value_with_eif(&self, kind: EstimatorKind, rule: &LinearRule) -> Result<ValueEstimate> {
        let k = self.folds.len() as f64;
        let total: usize = self
            .folds
            .iter()
            .map(|f| f.table.source_len() + f.table.target_len())
            .sum();
        let mut estimate = 0.0;
        let mut eif = Vec::with_capacity(total);
        for f in &self.folds {
            let e = f.table.estimate_with_eif(kind, rule)?;
            estimate += e.estimate / k;
            let phi = e.eif.ok_or(crate::estimators::EstimatorError::MissingEif)?;
            let scale = total as f64 / (k * phi.len() as f64);
            eif.extend(phi.iter().map(|v| v * scale));
        }
        Ok(ValueEstimate {
            kind,
            estimate,
            eif: Some(eif),
        })
    }

    /// Genetic search over the cross-fitted value surface.
    pub fn search(&self, kind: EstimatorKind, p: usize, ga: &GaConfig) -> Result<SearchResult> {
        Ok(genetic_search(
            |r| self.value(kind, r).unwrap_or(f64::NAN),
            p,
            ga,
        )?)
    }
}
