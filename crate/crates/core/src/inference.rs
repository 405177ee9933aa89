//! Bootstrap standard errors, percentile and Wald intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SourceSample, TargetSample};

/// Fresh resamples tried before a failing replicate is dropped.
pub const MAX_RETRIES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("at least two bootstrap replicates are required, got {0}")]
    TooFewReplicates(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("only {succeeded} of {requested} bootstrap replicates succeeded")]
    ReplicatesFailed { requested: usize, succeeded: usize },
    #[error("bootstrap statistics changed length between replicates")]
    InconsistentStatistics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Successful replicate values in replicate order.
    pub replicates: Vec<f64>,
    /// Replicates abandoned after [`MAX_RETRIES`] failed resamples.
    pub dropped: usize,
    /// Retries spent across all replicates.
    pub retries: usize,
    pub std_error: f64,
    pub percentile_ci: (f64, f64),
    pub level: f64,
    pub seed: u64,
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 || v.iter().all(|x| *x == v[0]) {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn resample<R: Rng>(len: usize, rng: &mut R) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..len)).collect()
}

/// Nonparametric bootstrap with independent source and target resampling.
///
/// Replicate `r`, attempt `a` draws the source indices from stream
/// `2 (r * (MAX_RETRIES + 1) + a)` of the master seed and the target indices
/// from the following stream, so results do not depend on scheduling.
pub fn bootstrap_value<F, E>(
    source: &SourceSample,
    target: &TargetSample,
    estimator: F,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult, InferenceError>
where
    F: Fn(&SourceSample, &TargetSample) -> Result<f64, E> + Sync,
{
    let mut out = bootstrap_values(
        source,
        target,
        |s, t| estimator(s, t).map(|v| vec![v]),
        replicates,
        level,
        seed,
    )?;
    Ok(out.swap_remove(0))
}

/// Like [`bootstrap_value`] for a closure returning several statistics from
/// the same resample (for example one value per estimator). A replicate
/// counts as failed if any statistic is non-finite. Returns one result per
/// statistic.
pub fn bootstrap_values<F, E>(
    source: &SourceSample,
    target: &TargetSample,
    statistics: F,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<BootstrapResult>, InferenceError>
where
    F: Fn(&SourceSample, &TargetSample) -> Result<Vec<f64>, E> + Sync,
{
    if replicates < 2 {
        return Err(InferenceError::TooFewReplicates(replicates));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidLevel(level));
    }
    let outcomes: Vec<(Option<Vec<f64>>, usize)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            for attempt in 0..=MAX_RETRIES {
                let stream = 2 * (r * (MAX_RETRIES + 1) + attempt) as u64;
                let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
                src_rng.set_stream(stream);
                let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed);
                tgt_rng.set_stream(stream + 1);
                let s = source.subset(&resample(source.len(), &mut src_rng));
                let t = target.subset(&resample(target.len(), &mut tgt_rng));
                if let (Ok(s), Ok(t)) = (s, t) {
                    if let Ok(v) = statistics(&s, &t) {
                        if !v.is_empty() && v.iter().all(|x| x.is_finite()) {
                            return (Some(v), attempt);
                        }
                    }
                }
            }
            (None, MAX_RETRIES)
        })
        .collect();
    let retries = outcomes.iter().map(|o| o.1).sum();
    let values: Vec<Vec<f64>> = outcomes.into_iter().filter_map(|o| o.0).collect();
    let dropped = replicates - values.len();
    if values.len() < 2 {
        return Err(InferenceError::ReplicatesFailed {
            requested: replicates,
            succeeded: values.len(),
        });
    }
    let k = values[0].len();
    if values.iter().any(|v| v.len() != k) {
        return Err(InferenceError::InconsistentStatistics);
    }
    let alpha = (1.0 - level) / 2.0;
    Ok((0..k)
        .map(|j| {
            let column: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let mut sorted = column.clone();
            sorted.sort_by(f64::total_cmp);
            BootstrapResult {
                std_error: sample_sd(&column),
                percentile_ci: (quantile(&sorted, alpha), quantile(&sorted, 1.0 - alpha)),
                replicates: column,
                dropped,
                retries,
                level,
                seed,
            }
        })
        .collect())
}

/// `estimate ± z_{(1+level)/2} * std_error`.
pub fn wald_ci(estimate: f64, std_error: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile((1.0 + level) / 2.0);
    (estimate - z * std_error, estimate + z * std_error)
}

/// Standard normal quantile (Wichura's AS 241, about 1e-16 relative accuracy).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, SourceRecord, TargetRecord};
    use rand_distr::{Distribution, Exp1};

    fn samples(n: usize, seed: u64) -> (SourceSample, TargetSample) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = (0..n)
            .map(|i| SourceRecord {
                x: vec![rng.random()],
                arm: Arm::from_indicator(i % 2 == 0),
                time: Exp1.sample(&mut rng),
                event: i % 3 != 2,
            })
            .collect();
        let tgt = (0..50)
            .map(|_| TargetRecord {
                x: vec![rng.random()],
                design_weight: 2.0,
            })
            .collect();
        (SourceSample::new(src).unwrap(), TargetSample::new(tgt).unwrap())
    }

    fn mean_time(s: &SourceSample) -> f64 {
        s.records().iter().map(|r| r.time).sum::<f64>() / s.len() as f64
    }

    #[test]
    fn constant_statistic_has_zero_spread() {
        let (s, t) = samples(40, 1);
        let b = bootstrap_value(&s, &t, |_, _| Ok::<_, ()>(0.7), 20, 0.95, 3).unwrap();
        assert_eq!(b.std_error, 0.0);
        assert_eq!(b.percentile_ci, (0.7, 0.7));
        assert_eq!(b.replicates.len() + b.dropped, 20);
    }

    #[test]
    fn mean_standard_error_matches_classical_formula() {
        let (s, t) = samples(400, 2);
        let u: Vec<f64> = s.records().iter().map(|r| r.time).collect();
        let classical = sample_sd(&u) / (u.len() as f64).sqrt();
        let b = bootstrap_value(&s, &t, |s, _| Ok::<_, ()>(mean_time(s)), 1000, 0.9, 5).unwrap();
        assert!((b.std_error / classical - 1.0).abs() < 0.15, "{} vs {classical}", b.std_error);
        let mut sorted = b.replicates.clone();
        sorted.sort_by(f64::total_cmp);
        let median = quantile(&sorted, 0.5);
        assert!(b.percentile_ci.0 <= median && median <= b.percentile_ci.1);
    }

    #[test]
    fn deterministic_and_counts_failures() {
        let (s, t) = samples(60, 4);
        let stat = |s: &SourceSample, _: &TargetSample| Ok::<_, ()>(mean_time(s));
        let a = bootstrap_value(&s, &t, stat, 30, 0.95, 9).unwrap();
        let b = bootstrap_value(&s, &t, stat, 30, 0.95, 9).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_value(&s, &t, stat, 30, 0.95, 10).unwrap();
        assert_ne!(a.replicates, c.replicates);

        let picky = |s: &SourceSample, _: &TargetSample| {
            let m = mean_time(s);
            if m > 1.0 {
                Err(())
            } else {
                Ok(m)
            }
        };
        let d = bootstrap_value(&s, &t, picky, 30, 0.95, 9).unwrap();
        assert_eq!(d.replicates.len() + d.dropped, 30);
        assert!(d.replicates.iter().all(|&m| m <= 1.0));
        assert!(bootstrap_value(&s, &t, |_, _| Err::<f64, _>(()), 5, 0.95, 1).is_err());
        assert!(bootstrap_value(&s, &t, stat, 1, 0.95, 1).is_err());
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.1) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn wald_intervals() {
        assert_eq!(wald_ci(0.3, 0.0, 0.95), (0.3, 0.3));
        let (lo, hi) = wald_ci(0.0, 1.0, 0.95);
        assert!((hi - 1.959963984540054).abs() < 1e-12 && lo == -hi);
        let (lo, hi) = wald_ci(1.0, 2.0, 0.9);
        assert!((lo - (1.0 - 2.0 * 1.6448536269514722)).abs() < 1e-12);
        assert!((hi - (1.0 + 2.0 * 1.6448536269514722)).abs() < 1e-12);
        assert!((normal_quantile(1e-10) + 6.361340902404056).abs() < 1e-11);
    }
}
