//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sampled_rnn_core::control::DareOptions;
use sampled_rnn_core::dynamics::{GenerationConfig, System, VectorField as _};
use sampled_rnn_core::embedding::{DelayConfig, Granularity};
use sampled_rnn_core::metrics::EklConfig;
use sampled_rnn_core::rnn::{DictionarySpec, FitOptions};
use sampled_rnn_core::sampling::{Activation, Density, SamplingConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub embedding: Option<DelayConfig>,
    pub model: ModelConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub control: Option<ControlConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Generated(GeneratedData),
    Csv(CsvData),
}

/// Trajectories simulated from a benchmark system. Each split has its own
/// protocol and is drawn from a distinct stream of `data_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedData {
    pub system: System,
    pub train: GenerationConfig,
    #[serde(default)]
    pub validation: Option<GenerationConfig>,
    pub test: GenerationConfig,
    #[serde(default)]
    pub data_seed: u64,
    /// Keep only these state coordinates as observations.
    #[serde(default)]
    pub observed_dims: Option<Vec<usize>>,
    /// Map each coordinate's training range onto this interval.
    #[serde(default)]
    pub normalize: Option<(f64, f64)>,
}

/// A single multivariate time series read from a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub path: PathBuf,
    pub time_column: String,
    /// `chrono` format string for the time column.
    #[serde(default = "default_time_format")]
    pub time_format: String,
    pub value_columns: Vec<String>,
    #[serde(default)]
    pub time_features: Vec<Granularity>,
    #[serde(default = "default_splits")]
    pub splits: (f64, f64, f64),
    #[serde(default)]
    pub normalize: Option<(f64, f64)>,
    /// Sampling interval recorded on the datasets.
    #[serde(default = "default_csv_dt")]
    pub dt: f64,
}

fn default_time_format() -> String {
    "%Y-%m-%d %H:%M:%S".into()
}

fn default_splits() -> (f64, f64, f64) {
    (0.7, 0.2, 0.1)
}

fn default_csv_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Swim,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KoopmanMode {
    /// `h' = C K F(h) (+ C B G(x))`.
    With,
    /// Direct regression of the next state on the features.
    Without,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDictionaryConfig {
    Identity,
    Swim { width: usize, activation: Activation },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub activation: Activation,
    pub rcond: f64,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingMode,
    #[serde(default = "default_density")]
    pub density: Density,
    #[serde(default = "default_koopman")]
    pub koopman: KoopmanMode,
    #[serde(default)]
    pub bias_in_regression: bool,
    #[serde(default)]
    pub input_dictionary: Option<InputDictionaryConfig>,
}

fn default_sampling() -> SamplingMode {
    SamplingMode::Swim
}

fn default_density() -> Density {
    Density::GradientWeighted
}

fn default_koopman() -> KoopmanMode {
    KoopmanMode::With
}

impl ModelConfig {
    pub fn state_dictionary(&self) -> DictionarySpec {
        match self.sampling {
            SamplingMode::Swim => {
                DictionarySpec::Swim(SamplingConfig::new(self.width, self.activation, self.density))
            }
            SamplingMode::Gaussian => DictionarySpec::Gaussian {
                width: self.width,
                activation: self.activation,
            },
        }
    }

    pub fn input_dictionary(&self) -> DictionarySpec {
        match self.input_dictionary {
            None | Some(InputDictionaryConfig::Identity) => DictionarySpec::Identity,
            Some(InputDictionaryConfig::Swim { width, activation }) => {
                DictionarySpec::Swim(SamplingConfig::new(width, activation, Density::Uniform))
            }
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        let mut opts = FitOptions::new(self.rcond);
        opts.bias_in_regression = self.bias_in_regression;
        opts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Ekl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub metric: Metric,
    /// Closed-loop steps per test trajectory; the full trajectory when absent.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Rollout length between ground-truth restarts for CSV series.
    #[serde(default)]
    pub chunk_horizon: Option<usize>,
    #[serde(default)]
    pub ekl: EklConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Diagonal state cost in physical coordinates.
    pub q: f64,
    /// Diagonal input cost.
    pub r: f64,
    pub h0: Vec<f64>,
    pub target: Vec<f64>,
    pub steps: usize,
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
    #[serde(default)]
    pub dare: DareOptions,
    /// Samples used to fit the lifted-input projection for nonlinear input
    /// dictionaries.
    #[serde(default = "default_projection_samples")]
    pub projection_samples: usize,
    /// Restrict the LQR problem to feature directions whose training
    /// singular value exceeds this fraction of the largest one.
    #[serde(default)]
    pub subspace_cutoff: Option<f64>,
}

fn default_projection_samples() -> usize {
    2000
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let DataConfig::Csv(csv) = &mut cfg.data {
            if csv.path.is_relative() {
                if let Some(dir) = path.parent() {
                    csv.path = dir.join(&csv.path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.model.width == 0 {
            return bad("model width must be positive".into());
        }
        if !(self.model.rcond >= 0.0) {
            return bad("rcond must be non-negative".into());
        }
        if self.evaluation.horizon == Some(0) {
            return bad("evaluation horizon must be positive".into());
        }
        match &self.data {
            DataConfig::Generated(g) => {
                if let Some(dims) = &g.observed_dims {
                    if dims.is_empty() || dims.iter().any(|&d| d >= g.system.state_dim()) {
                        return bad(format!("observed_dims {dims:?} out of range"));
                    }
                }
                if self.control.is_some() && g.system.input_dim() == 0 {
                    return bad(format!("{} has no input to control", g.system.name()));
                }
            }
            DataConfig::Csv(c) => {
                if c.value_columns.is_empty() {
                    return bad("at least one value column".into());
                }
                let (a, b, t) = c.splits;
                if a <= 0.0 || b < 0.0 || t <= 0.0 || (a + b + t - 1.0).abs() > 1e-9 {
                    return bad(format!("split fractions {:?} must be positive and sum to 1", c.splits));
                }
                if self.control.is_some() {
                    return bad("control runs need a simulated plant".into());
                }
                if self.embedding.is_none() {
                    return bad("CSV series need a delay embedding".into());
                }
            }
        }
        if let Some(c) = &self.control {
            if c.h0.len() != c.target.len() {
                return bad("control h0 and target differ in length".into());
            }
            if c.steps == 0 || !(c.q >= 0.0) || !(c.r > 0.0) {
                return bad("control needs steps ≥ 1, q ≥ 0 and r > 0".into());
            }
            if c.subspace_cutoff.is_some_and(|v| !(0.0..1.0).contains(&v)) {
                return bad("subspace_cutoff must lie in [0, 1)".into());
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Option<&System> {
        match &self.data {
            DataConfig::Generated(g) => Some(&g.system),
            DataConfig::Csv(_) => None,
        }
    }

    pub fn is_controlled(&self) -> bool {
        self.system().is_some_and(|s| s.input_dim() > 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_in_repository_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                let cfg = ExperimentConfig::load(&path).unwrap();
                let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
                assert_eq!(back, cfg);
                seen += 1;
            }
        }
        assert!(seen >= 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/van_der_pol.json");
        let base = ExperimentConfig::load(&path).unwrap();
        let mut cfg = base.clone();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = base.clone();
        cfg.model.rcond = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base;
        cfg.control = Some(ControlConfig {
            q: 1.0,
            r: 1.0,
            h0: vec![0.0, 0.0],
            target: vec![0.0, 0.0],
            steps: 1,
            clamp: None,
            dare: DareOptions::default(),
            projection_samples: 10,
            subspace_cutoff: None,
        });
        assert!(cfg.validate().is_err());
    }
}
