//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use itr_core::estimators::{EstimatorKind, EstimatorOptions, Functional};
use itr_core::features::{MomentOrder, MomentSpec, Term};
use itr_core::pipeline::ModelSpec;
use itr_core::policy::GaConfig;
use itr_core::simulation::{DgpConfig, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moments {
    None,
    First,
    #[serde(alias = "first_and_second")]
    First2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub moments: Moments,
    pub interactions: bool,
    pub transforms: Vec<Term>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            moments: Moments::First,
            interactions: false,
            transforms: Vec::new(),
        }
    }
}

impl CalibrationConfig {
    pub fn moment_spec(&self) -> Option<MomentSpec> {
        let order = match self.moments {
            Moments::None => None,
            Moments::First => Some(MomentOrder::First),
            Moments::First2 => Some(MomentOrder::FirstAndSecond),
        };
        if order.is_none() && self.transforms.is_empty() && !self.interactions {
            return None;
        }
        Some(MomentSpec {
            order,
            include_interactions: self.interactions,
            transforms: self.transforms.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learners {
    /// The `[models]` section.
    Parametric,
    /// Kernel smoothers for every nuisance.
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossfitConfig {
    #[serde(rename = "K", alias = "folds")]
    pub folds: usize,
    pub learners: Learners,
}

impl Default for CrossfitConfig {
    fn default() -> Self {
        Self {
            folds: 2,
            learners: Learners::Kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(rename = "B", alias = "replicates")]
    pub replicates: usize,
    pub level: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// Re-run the rule search inside every replicate instead of fixing the
    /// learned rule.
    pub research: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            level: 0.95,
            seed: None,
            research: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPathway {
    Parametric,
    Crossfit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: String,
    pub reps: usize,
    pub pathway: SimPathway,
    pub out: Option<PathBuf>,
    pub replicates_out: Option<PathBuf>,
    pub dgp: DgpConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scenario: "tttt".into(),
            reps: 100,
            pathway: SimPathway::Parametric,
            out: None,
            replicates_out: None,
            dgp: DgpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub functional: Functional,
    /// Optional fixed rule; skips the search.
    pub eta: Option<Vec<f64>>,
    pub data: DataConfig,
    pub models: ModelSpec,
    pub calibration: CalibrationConfig,
    pub ga: GaConfig,
    pub crossfit: CrossfitConfig,
    pub bootstrap: BootstrapConfig,
    pub simulate: SimulateConfig,
    pub options: EstimatorOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            estimators: EstimatorKind::REPORTED.to_vec(),
            functional: Functional::Rmst(4.0),
            eta: None,
            data: DataConfig::default(),
            models: ModelSpec::default(),
            calibration: CalibrationConfig::default(),
            ga: GaConfig::default(),
            crossfit: CrossfitConfig::default(),
            bootstrap: BootstrapConfig::default(),
            simulate: SimulateConfig::default(),
            options: EstimatorOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Working models with the calibration section applied.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            calibration: self.calibration.moment_spec(),
            ..self.models.clone()
        }
    }

    pub fn scenario(&self) -> anyhow::Result<ScenarioSpec> {
        Ok(self.simulate.scenario.parse()?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.estimators.is_empty() {
            bail!("no estimators requested");
        }
        let h = self.functional.horizon();
        if !(h.is_finite() && h > 0.0) {
            bail!("functional horizon must be positive, got {h}");
        }
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            bail!("bootstrap.level must lie in (0, 1)");
        }
        self.ga.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.calibration.transforms = vec!["exp(x1)".parse().unwrap()];
        c.eta = Some(vec![0.5, -1.0, 1.0]);
        let back: RunConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn reads_short_keys() {
        let c: RunConfig = toml::from_str(
            r#"
            estimators = ["acw", "cw-or"]
            functional = { kind = "survival_at", horizon = 2.0 }
            [calibration]
            moments = "first2"
            [bootstrap]
            B = 50
            [crossfit]
            K = 3
            "#,
        )
        .unwrap();
        assert_eq!(c.bootstrap.replicates, 50);
        assert_eq!(c.crossfit.folds, 3);
        assert_eq!(c.functional, Functional::SurvivalAt(2.0));
        assert_eq!(c.model_spec().calibration, Some(MomentSpec::first_and_second()));
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
