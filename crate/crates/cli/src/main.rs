//! `itr`: learn and evaluate individualized treatment rules for censored
//! survival outcomes transported to a target population.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use itr_core::estimators::{EstimatorKind, Functional};

use crate::config::{Learners, Moments, RunConfig, SimPathway};

#[derive(Parser, Debug)]
#[command(name = "itr", version, about = "Optimal treatment rules for censored survival under covariate shift")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "ITR_WORKERS")]
    workers: Option<usize>,
    /// Master seed for searches, folds, bootstrap and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long, global = true)]
    json: bool,
    /// Print nothing on success.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo study on the built-in data-generating process.
    Simulate(SimulateArgs),
    /// Full-sample working models, rule search and plug-in standard errors.
    Fit(DataArgs),
    /// Cross-fitted nuisances, rule search and influence-function standard errors.
    Search(SearchArgs),
    /// Nonparametric bootstrap of the learned rules' values.
    Bootstrap(BootstrapArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FunctionalArg {
    Rmst,
    Survival,
}

#[derive(Args, Debug, Default)]
struct EstimationArgs {
    /// Comma-separated estimators (acw, naive, ipsw, cw-ipw, cw-or, ort).
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<EstimatorKind>,
    #[arg(long, value_enum)]
    functional: Option<FunctionalArg>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Evaluate this rule (intercept first) instead of searching.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    eta: Option<Vec<f64>>,
    #[arg(long)]
    generations: Option<usize>,
    /// Genetic algorithm population size.
    #[arg(long)]
    ga_population: Option<usize>,
    /// Calibration moments: none, first or first2.
    #[arg(long)]
    moments: Option<String>,
    /// Confidence level.
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    est: EstimationArgs,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_enum)]
    learners: Option<LearnersArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LearnersArg {
    Parametric,
    Kernel,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Bootstrap replicates.
    #[arg(long, short = 'B')]
    replicates: Option<usize>,
    /// Re-run the search within each replicate.
    #[arg(long)]
    research: bool,
    #[arg(long)]
    bootstrap_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Working-model scenario: tttt, twww, wttt or wwww (or tt, tw, wt, ww).
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum)]
    pathway: Option<PathwayArg>,
    /// Summary CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replicate CSV (defaults to `<out>_replicates.csv`).
    #[arg(long)]
    replicates_out: Option<PathBuf>,
    /// Finite population size N.
    #[arg(long)]
    population_size: Option<usize>,
    /// Target sample size m.
    #[arg(long)]
    target_size: Option<usize>,
    #[arg(long)]
    censoring_scale: Option<f64>,
    /// Size of the sample used for true values.
    #[arg(long)]
    oracle_size: Option<usize>,
    /// Bootstrap replicates per replicate (parametric pathway).
    #[arg(long, short = 'B')]
    replicates: Option<usize>,
    /// Folds (cross-fitted pathway).
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    est: EstimationArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PathwayArg {
    Parametric,
    Crossfit,
}

fn apply_estimation(cfg: &mut RunConfig, a: &EstimationArgs) -> anyhow::Result<()> {
    if !a.estimators.is_empty() {
        cfg.estimators = a.estimators.clone();
    }
    let horizon = a.horizon.unwrap_or(cfg.functional.horizon());
    cfg.functional = match (a.functional, cfg.functional) {
        (Some(FunctionalArg::Rmst), _) | (None, Functional::Rmst(_)) => Functional::Rmst(horizon),
        (Some(FunctionalArg::Survival), _) | (None, Functional::SurvivalAt(_)) => Functional::SurvivalAt(horizon),
    };
    if let Some(eta) = &a.eta {
        cfg.eta = Some(eta.clone());
    }
    if let Some(g) = a.generations {
        cfg.ga.generations = g;
    }
    if let Some(p) = a.ga_population {
        cfg.ga.population_size = p;
    }
    if let Some(m) = &a.moments {
        cfg.calibration.moments = match m.as_str() {
            "none" => Moments::None,
            "first" => Moments::First,
            "first2" | "first_and_second" => Moments::First2,
            other => anyhow::bail!("unknown calibration moments '{other}' (none, first, first2)"),
        };
    }
    if let Some(l) = a.level {
        cfg.bootstrap.level = l;
    }
    Ok(())
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) -> anyhow::Result<()> {
    if a.source.is_some() {
        cfg.data.source = a.source.clone();
    }
    if a.target.is_some() {
        cfg.data.target = a.target.clone();
    }
    apply_estimation(cfg, &a.est)
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
        cfg.ga.seed = s;
    }
    match &cli.command {
        Command::Fit(a) => apply_data(&mut cfg, a)?,
        Command::Search(a) => {
            apply_data(&mut cfg, &a.data)?;
            if let Some(k) = a.folds {
                cfg.crossfit.folds = k;
            }
            if let Some(l) = a.learners {
                cfg.crossfit.learners = match l {
                    LearnersArg::Parametric => Learners::Parametric,
                    LearnersArg::Kernel => Learners::Kernel,
                };
            }
        }
        Command::Bootstrap(a) => {
            apply_data(&mut cfg, &a.data)?;
            if let Some(b) = a.replicates {
                cfg.bootstrap.replicates = b;
            }
            if a.research {
                cfg.bootstrap.research = true;
            }
            if a.bootstrap_seed.is_some() {
                cfg.bootstrap.seed = a.bootstrap_seed;
            }
        }
        Command::Simulate(a) => {
            apply_estimation(&mut cfg, &a.est)?;
            let sim = &mut cfg.simulate;
            if let Some(s) = &a.scenario {
                sim.scenario = s.clone();
            }
            if let Some(r) = a.reps {
                sim.reps = r;
            }
            if let Some(p) = a.pathway {
                sim.pathway = match p {
                    PathwayArg::Parametric => SimPathway::Parametric,
                    PathwayArg::Crossfit => SimPathway::Crossfit,
                };
            }
            if a.out.is_some() {
                sim.out = a.out.clone();
            }
            if a.replicates_out.is_some() {
                sim.replicates_out = a.replicates_out.clone();
            }
            if let Some(n) = a.population_size {
                sim.dgp.population_size = n;
            }
            if let Some(m) = a.target_size {
                sim.dgp.target_size = m;
            }
            if let Some(c) = a.censoring_scale {
                sim.dgp.censoring_scale = c;
            }
            if let Some(o) = a.oracle_size {
                sim.dgp.oracle_size = o;
            }
            if let Some(b) = a.replicates {
                cfg.bootstrap.replicates = b;
            }
            if let Some(k) = a.folds {
                cfg.crossfit.folds = k;
            }
            cfg.scenario()?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(&cli)?;
    if let Some(w) = cli.global.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let start = Instant::now();
    let (name, output) = match &cli.command {
        Command::Simulate(_) => ("simulate", commands::simulate(&cfg)?),
        Command::Fit(_) => ("fit", commands::fit(&cfg)?),
        Command::Search(_) => ("search", commands::search(&cfg)?),
        Command::Bootstrap(_) => ("bootstrap", commands::bootstrap(&cfg)?),
    };
    let report = output.into_report(name, cfg, start.elapsed().as_secs_f64());
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &cli.global.report {
        std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    if !cli.global.quiet {
        if cli.global.json {
            println!("{json}");
        } else {
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<itr_core::error::Error>())
        .any(itr_core::error::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
