use std::fs;
use std::path::{Path, PathBuf};

use phenoscribe::cohort::SynthConfig;
use phenoscribe::dsp::DspConfig;
use phenoscribe::evalkit::experiment::{ExperimentConfig, DEFAULT_LAMBDAS};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Directory layout under the work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub cohort: PathBuf,
    pub cache: PathBuf,
    pub checkpoints: PathBuf,
    pub results: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            cohort: "cohort".into(),
            cache: "cache".into(),
            checkpoints: "checkpoints".into(),
            results: "results".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Train, validation and test shares of patients.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fractions: [0.6, 0.2, 0.2], seed: 7 }
    }
}

/// Everything a command reads from the config file. Every field has a
/// default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub dsp: DspConfig,
    pub experiment: ExperimentConfig,
    /// Auxiliary-weight grid for `ablate`.
    pub lambdas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            dsp: DspConfig::default(),
            experiment: ExperimentConfig::default(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let f = self.split.fractions;
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {f:?} must be non-negative and sum to 1"));
        }
        if self.synth.n_arms == 0 {
            return bad("synth.n_arms must be positive".into());
        }
        let lm = &self.experiment.lm;
        if lm.n_heads == 0 || lm.d_model % lm.n_heads != 0 {
            return bad(format!("lm.d_model {} is not divisible by lm.n_heads {}", lm.d_model, lm.n_heads));
        }
        let fu = &self.experiment.fusion;
        if fu.n_heads == 0 || lm.d_model % fu.n_heads != 0 {
            return bad(format!("fusion heads {} must divide the shared width {}", fu.n_heads, lm.d_model));
        }
        if let Some(w) = fu.w_plus {
            if w.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return bad(format!("fusion.w_plus {w:?} must be positive"));
            }
        }
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds is empty".into());
        }
        if self.experiment.architectures.is_empty() {
            return bad("experiment.architectures is empty".into());
        }
        let lambdas = std::iter::once(&self.experiment.lambda_aux).chain(&self.lambdas);
        if self.lambdas.is_empty() || lambdas.into_iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("auxiliary weights must be a non-empty list of non-negative numbers".into());
        }
        Ok(())
    }

    /// Config echo stored inside output artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
