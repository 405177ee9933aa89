//! The four subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use itr_core::crossfit::{make_folds, CrossFitted};
use itr_core::data::{LinearRule, SourceSample, TargetSample};
use itr_core::estimators::{EstimatorKind, EvalGrid};
use itr_core::inference::{bootstrap_values, wald_ci};
use itr_core::io::{read_source, read_target};
use itr_core::pipeline::{evaluate_rules, fit_rules, FitOutcome, ModelSpec};
use itr_core::policy::normalize_eta;
use itr_core::simulation::{oracle_ga, run_study, Pathway, StudyConfig, StudyOracle};

use crate::config::{Learners, RunConfig, SimPathway};
use crate::report::{BootstrapRow, EstimateRow, Report, SimulationSummary};

/// Everything a command produces besides timing.
pub struct Output {
    pub source_size: Option<usize>,
    pub target_size: Option<usize>,
    pub estimates: Vec<EstimateRow>,
    pub bootstrap: Vec<BootstrapRow>,
    pub simulation: Option<SimulationSummary>,
}

impl Output {
    pub fn into_report(self, command: &str, config: RunConfig, seconds: f64) -> Report {
        Report {
            command: command.to_string(),
            seed: config.seed,
            source_size: self.source_size,
            target_size: self.target_size,
            estimates: self.estimates,
            bootstrap: self.bootstrap,
            simulation: self.simulation,
            config,
            runtime: crate::report::Runtime {
                seconds,
                workers: rayon::current_num_threads(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
        }
    }
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<(SourceSample, TargetSample)> {
    let need = |p: &Option<PathBuf>, what: &str| -> anyhow::Result<PathBuf> {
        p.clone()
            .with_context(|| format!("no {what} file given (use --{what} or [data] {what})"))
    };
    let source = read_source(need(&cfg.data.source, "source")?)?;
    let target = read_target(need(&cfg.data.target, "target")?, source.covariate_names())?;
    Ok((source, target))
}

fn fixed_rule(cfg: &RunConfig, p: usize) -> anyhow::Result<Option<LinearRule>> {
    let Some(eta) = &cfg.eta else { return Ok(None) };
    if eta.len() != p + 1 {
        bail!("eta has {} coefficients but the data have {p} covariates (expected {})", eta.len(), p + 1);
    }
    Ok(Some(normalize_eta(eta).map_err(itr_core::error::Error::from)?))
}

fn estimate_row(o: &FitOutcome, source: &SourceSample, level: f64) -> EstimateRow {
    EstimateRow {
        estimator: o.kind.to_string(),
        estimate: o.estimate,
        std_error: o.std_error,
        ci: o.std_error.map(|se| wald_ci(o.estimate, se, level)),
        eta: o.rule.eta().to_vec(),
        covariates: source.covariate_names().to_vec(),
        search_history_last: o.search.as_ref().and_then(|s| s.history.last().copied()),
        evaluations: o.search.as_ref().map(|s| s.evaluations),
    }
}

pub fn fit(cfg: &RunConfig) -> anyhow::Result<Output> {
    let (source, target) = load_data(cfg)?;
    let fixed = fixed_rule(cfg, source.dim())?;
    let outcomes = fit_rules(
        &source,
        &target,
        &cfg.model_spec(),
        cfg.functional,
        &cfg.estimators,
        &cfg.ga,
        fixed.as_ref(),
        &cfg.options,
    )?;
    Ok(Output {
        source_size: Some(source.len()),
        target_size: Some(target.len()),
        estimates: outcomes
            .iter()
            .map(|o| estimate_row(o, &source, cfg.bootstrap.level))
            .collect(),
        bootstrap: Vec::new(),
        simulation: None,
    })
}

pub fn search(cfg: &RunConfig) -> anyhow::Result<Output> {
    let (source, target) = load_data(cfg)?;
    let fixed = fixed_rule(cfg, source.dim())?;
    let folds = make_folds(source.len(), target.len(), cfg.crossfit.folds, cfg.seed)?;
    let mut spec = match cfg.crossfit.learners {
        Learners::Parametric => cfg.model_spec(),
        Learners::Kernel => ModelSpec {
            calibration: cfg.calibration.moment_spec(),
            ..ModelSpec::kernel()
        },
    };
    if cfg.crossfit.learners == Learners::Kernel && cfg.estimators.iter().any(|k| k.needs_sampling_score()) {
        spec.sampling_score = Some(itr_core::pipeline::ProbabilitySpec::kernel());
    }
    let spec = spec.restricted_to(&cfg.estimators);
    let grid = EvalGrid::for_functional(cfg.functional, &source)?;
    let cf = CrossFitted::fit(&source, &target, &folds, &spec, &grid, &cfg.options)?;
    let mut estimates = Vec::with_capacity(cfg.estimators.len());
    for (i, &kind) in cfg.estimators.iter().enumerate() {
        let (rule, found) = match &fixed {
            Some(r) => (r.clone(), None),
            None => {
                let ga = itr_core::policy::GaConfig {
                    seed: cfg.ga.seed.wrapping_add(i as u64),
                    ..cfg.ga.clone()
                };
                let s = cf.search(kind, source.dim(), &ga)?;
                (s.best_rule.clone(), Some(s))
            }
        };
        let (estimate, std_error) = if matches!(kind, EstimatorKind::Acw | EstimatorKind::DrSource) {
            let v = cf.value_with_eif(kind, &rule)?;
            (v.estimate, Some(v.eif_variance()?.1))
        } else {
            (cf.value(kind, &rule)?, None)
        };
        let outcome = FitOutcome {
            kind,
            rule,
            estimate,
            std_error,
            search: found,
        };
        estimates.push(estimate_row(&outcome, &source, cfg.bootstrap.level));
    }
    Ok(Output {
        source_size: Some(source.len()),
        target_size: Some(target.len()),
        estimates,
        bootstrap: Vec::new(),
        simulation: None,
    })
}

pub fn bootstrap(cfg: &RunConfig) -> anyhow::Result<Output> {
    let (source, target) = load_data(cfg)?;
    let fixed = fixed_rule(cfg, source.dim())?;
    let spec = cfg.model_spec();
    let outcomes = fit_rules(
        &source,
        &target,
        &spec,
        cfg.functional,
        &cfg.estimators,
        &cfg.ga,
        fixed.as_ref(),
        &cfg.options,
    )?;
    let rules: Vec<LinearRule> = outcomes.iter().map(|o| o.rule.clone()).collect();
    let research = cfg.bootstrap.research && fixed.is_none();
    let seed = cfg.bootstrap.seed.unwrap_or(cfg.seed);
    let results = bootstrap_values(
        &source,
        &target,
        |s: &SourceSample, t: &TargetSample| {
            if research {
                fit_rules(s, t, &spec, cfg.functional, &cfg.estimators, &cfg.ga, None, &cfg.options)
                    .map(|v| v.iter().map(|o| o.estimate).collect())
            } else {
                evaluate_rules(s, t, &spec, cfg.functional, &cfg.estimators, &rules, &cfg.options)
            }
        },
        cfg.bootstrap.replicates,
        cfg.bootstrap.level,
        seed,
    )
    .map_err(itr_core::error::Error::from)?;
    let mut estimates = Vec::with_capacity(outcomes.len());
    let mut rows = Vec::with_capacity(outcomes.len());
    for (o, b) in outcomes.iter().zip(&results) {
        let mut row = estimate_row(o, &source, cfg.bootstrap.level);
        row.std_error = Some(b.std_error);
        row.ci = Some(wald_ci(o.estimate, b.std_error, cfg.bootstrap.level));
        estimates.push(row);
        rows.push(BootstrapRow {
            estimator: o.kind.to_string(),
            std_error: b.std_error,
            percentile_ci: b.percentile_ci,
            requested: cfg.bootstrap.replicates,
            dropped: b.dropped,
            seed: b.seed,
        });
    }
    Ok(Output {
        source_size: Some(source.len()),
        target_size: Some(target.len()),
        estimates,
        bootstrap: rows,
        simulation: None,
    })
}

fn default_replicates_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    out.with_file_name(format!("{stem}_replicates.csv"))
}

pub fn study_config(cfg: &RunConfig) -> anyhow::Result<StudyConfig> {
    let sim = &cfg.simulate;
    let fixed_rule = match &cfg.eta {
        Some(eta) => Some(normalize_eta(eta).map_err(itr_core::error::Error::from)?.eta().to_vec()),
        None => None,
    };
    let pathway = match sim.pathway {
        SimPathway::Parametric => Pathway::Parametric {
            bootstrap: cfg.bootstrap.replicates,
        },
        SimPathway::Crossfit => Pathway::CrossFit {
            folds: cfg.crossfit.folds,
        },
    };
    let study = StudyConfig {
        dgp: sim.dgp.clone(),
        scenario: cfg.scenario()?,
        estimators: cfg.estimators.clone(),
        replications: sim.reps,
        seed: cfg.seed,
        ga: cfg.ga.clone(),
        pathway,
        level: cfg.bootstrap.level,
        options: cfg.options,
        models: None,
        fixed_rule,
    };
    study.validate()?;
    Ok(study)
}

pub fn simulate(cfg: &RunConfig) -> anyhow::Result<Output> {
    let study = study_config(cfg)?;
    let oracle = StudyOracle::build(&study.dgp, &oracle_ga(study.dgp.oracle_seed))?;
    let table = run_study(&study, &oracle)?;
    if let Some(out) = &cfg.simulate.out {
        let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
        table.write_summary(BufWriter::new(file))?;
        let reps = cfg
            .simulate
            .replicates_out
            .clone()
            .unwrap_or_else(|| default_replicates_path(out));
        let file = File::create(&reps).with_context(|| format!("creating {}", reps.display()))?;
        table.write_replicates(BufWriter::new(file))?;
    }
    Ok(Output {
        source_size: None,
        target_size: Some(study.dgp.target_size),
        estimates: Vec::new(),
        bootstrap: Vec::new(),
        simulation: Some(SimulationSummary {
            scenario: table.scenario.clone(),
            optimal_rule: table.optimal_rule.clone(),
            optimal_value: table.optimal_value,
            mean_source_size: table.mean_source_size,
            rows: table.rows.clone(),
        }),
    })
}
