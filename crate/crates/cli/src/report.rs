//! JSON report and its plain-text rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use itr_core::simulation::SummaryRow;

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimator: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// Wald interval around `estimate`.
    pub ci: Option<(f64, f64)>,
    pub eta: Vec<f64>,
    pub covariates: Vec<String>,
    /// Best value per generation when a search was run.
    pub search_history_last: Option<f64>,
    pub evaluations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub estimator: String,
    pub std_error: f64,
    pub percentile_ci: (f64, f64),
    pub requested: usize,
    pub dropped: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub scenario: String,
    pub optimal_rule: Vec<f64>,
    pub optimal_value: f64,
    pub mean_source_size: f64,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Runtime {
    pub seconds: f64,
    pub workers: usize,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub source_size: Option<usize>,
    pub target_size: Option<usize>,
    pub estimates: Vec<EstimateRow>,
    pub bootstrap: Vec<BootstrapRow>,
    pub simulation: Option<SimulationSummary>,
    pub config: RunConfig,
    pub runtime: Runtime,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "-".into()
    }
}

impl Report {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "itr {} (seed {})", self.command, self.seed);
        if let (Some(n), Some(m)) = (self.source_size, self.target_size) {
            let _ = writeln!(s, "source n = {n}, target m = {m}");
        }
        if !self.estimates.is_empty() {
            let _ = writeln!(s, "\n{:<10} {:>10} {:>10} {:>22}  eta", "estimator", "value", "se", "ci");
            for e in &self.estimates {
                let ci = e
                    .ci
                    .map(|(lo, hi)| format!("[{}, {}]", num(lo), num(hi)))
                    .unwrap_or_else(|| "-".into());
                let eta: Vec<String> = e.eta.iter().map(|v| format!("{v:.3}")).collect();
                let _ = writeln!(
                    s,
                    "{:<10} {:>10} {:>10} {:>22}  ({})",
                    e.estimator,
                    num(e.estimate),
                    e.std_error.map_or("-".into(), num),
                    ci,
                    eta.join(", ")
                );
            }
        }
        if !self.bootstrap.is_empty() {
            let _ = writeln!(s, "\nbootstrap ({} replicates)", self.bootstrap[0].requested);
            for b in &self.bootstrap {
                let _ = writeln!(
                    s,
                    "{:<10} se {}  percentile [{}, {}]  dropped {}",
                    b.estimator,
                    num(b.std_error),
                    num(b.percentile_ci.0),
                    num(b.percentile_ci.1),
                    b.dropped
                );
            }
        }
        if let Some(sim) = &self.simulation {
            let _ = writeln!(
                s,
                "\n{}  optimal value {}  mean n {:.1}",
                sim.scenario,
                num(sim.optimal_value),
                sim.mean_source_size
            );
            let _ = writeln!(
                s,
                "{:<10} {:>9} {:>9} {:>9} {:>8} {:>9} {:>7} {:>6}",
                "estimator", "bias", "sd", "se", "cp(%)", "true", "pcd", "fail"
            );
            for r in &sim.rows {
                let _ = writeln!(
                    s,
                    "{:<10} {:>9} {:>9} {:>9} {:>8} {:>9} {:>7} {:>6}",
                    r.estimator.to_string(),
                    num(r.bias),
                    num(r.sd),
                    num(r.se),
                    if r.cp.is_finite() { format!("{:.2}", r.cp) } else { "-".into() },
                    num(r.true_value),
                    num(r.pcd),
                    r.failures
                );
            }
        }
        let _ = writeln!(s, "\nfinished in {:.1}s on {} worker(s)", self.runtime.seconds, self.runtime.workers);
        s
    }
}
