//! Run configuration, validated before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zsrl_core::feature_opt::TrainerConfig;
use zsrl_core::generators::GeneratorSpec;
use zsrl_core::mdp::TabularMdp;
use zsrl_core::priors::{MetricK, PriorSpec};
use zsrl_core::rng::LabRng;

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    Generator(GeneratorSpec),
    /// JSON file in the `TabularMdp` schema.
    File(PathBuf),
}

impl MdpSource {
    pub fn load(&self, rng: &mut LabRng) -> LabResult<TabularMdp> {
        match self {
            MdpSource::Generator(spec) => spec.generate(rng).map_err(LabError::stage("mdp generation")),
            MdpSource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| LabError::Load {
                    stage: "mdp load",
                    path: path.clone(),
                    source,
                })?;
                TabularMdp::from_json(&text).map_err(LabError::stage("mdp load"))
            }
        }
    }
}

/// Metric used by the encoder. `Matched` takes the prior's own metric, or
/// white noise for priors without one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderNorm {
    #[default]
    Matched,
    WhiteNoise,
    Dirichlet {
        alpha: f64,
    },
}

impl EncoderNorm {
    pub fn metric(&self, mdp: &TabularMdp, matched: MetricK) -> zsrl_core::Result<MetricK> {
        match self {
            EncoderNorm::Matched => Ok(matched),
            EncoderNorm::WhiteNoise => MetricK::white_noise(mdp.rho()),
            EncoderNorm::Dirichlet { alpha } => MetricK::dirichlet(mdp, *alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Deterministic quadrature of the code-space integral.
    Exact,
    Direct,
    GaussianForm,
    SparseForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Also report the variance-penalized loss with this weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_lambda: Option<f64>,
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Exact, Estimator::Direct]
}

fn default_samples() -> usize {
    2000
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { estimators: default_estimators(), n_samples: default_samples(), variance_lambda: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    pub prior: PriorSpec,
    #[serde(default)]
    pub encoder: EncoderNorm,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> LabResult<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> LabResult<()> {
        self.trainer.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if self.eval.n_samples < 2 {
            return Err(LabError::Config("eval.n_samples must be at least 2".into()));
        }
        if let Some(lambda) = self.eval.variance_lambda {
            if !(lambda >= 0.0) {
                return Err(LabError::Config(format!("variance_lambda must be nonnegative, got {lambda}")));
            }
        }
        if let EncoderNorm::Dirichlet { alpha } = self.encoder {
            if !(alpha > 0.0) {
                return Err(LabError::Config(format!("Dirichlet alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form without the output directory.
    pub fn hash(&self) -> String {
        let canonical = Self { out: None, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// SHA-256 of any serializable experiment description.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("value serializes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "mdp": {"generator": {"name": "chain", "n": 4}},
        "prior": {"type": "gaussian", "metric": "white_noise"},
        "trainer": {"d": 2}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.encoder, EncoderNorm::Matched);
        assert_eq!(c.eval, EvalSpec::default());
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn non_binary_lambda_c_is_a_config_error() {
        let text = MINIMAL.replace(r#""d": 2"#, r#""d": 2, "lambda_c": 0.5"#);
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("λ_C ∈ {0,1}"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace(r#""trainer""#, r#""bogus": 1, "trainer""#);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(LabError::Config(_))));
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let b = ExperimentConfig { out: Some("/tmp/elsewhere".into()), ..a.clone() };
        let c = ExperimentConfig { seed: 9, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
