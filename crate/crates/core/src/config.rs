//! Experiment configuration loaded from JSON.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Binary,
}

/// How each layer's inference function is fed, plus the two non-amortized
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    AR1,
    AR2,
    AR2P,
    AR2PP,
    DS,
    DSPP,
}

impl Rule {
    pub fn is_amortized(self) -> bool {
        !matches!(self, Rule::DS | Rule::DSPP)
    }

    /// Deterministic learnable quadrature paths instead of sampled ones.
    pub fn uses_quadrature(self) -> bool {
        matches!(self, Rule::AR2P | Rule::AR2PP | Rule::DSPP)
    }

    /// Trained on the predictive log-likelihood instead of the ELBO.
    pub fn predictive_objective(self) -> bool {
        matches!(self, Rule::AR2PP | Rule::DSPP)
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::AR1 => "AR1",
            Rule::AR2 => "AR2",
            Rule::AR2P => "AR2P",
            Rule::AR2PP => "AR2PP",
            Rule::DS => "DS",
            Rule::DSPP => "DSPP",
        }
    }
}

impl std::str::FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AR1" => Ok(Rule::AR1),
            "AR2" => Ok(Rule::AR2),
            "AR2P" => Ok(Rule::AR2P),
            "AR2PP" => Ok(Rule::AR2PP),
            "DS" => Ok(Rule::DS),
            "DSPP" => Ok(Rule::DSPP),
            _ => Err(Error::Config(format!("unknown rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    BernoulliProbit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceFn {
    AffineMlp,
    JointMlp,
    Global,
}

fn default_eval_samples() -> usize {
    32
}
fn default_lr() -> f64 {
    0.005
}
fn default_batch() -> usize {
    100
}
fn default_epochs() -> usize {
    100
}
fn default_beta() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}
fn default_hermite() -> usize {
    crate::gpmath::DEFAULT_HERMITE_POINTS
}
fn default_toy_n() -> usize {
    40_000
}
fn default_noise_var() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// CSV path, or `"toy"` for the generated letters problem.
    pub dataset: String,
    /// Whether the CSV starts with a header line.
    #[serde(default)]
    pub header: bool,
    /// Zero-based label column; the last column when absent.
    #[serde(default)]
    pub label_column: Option<usize>,
    /// Training-set size of the generated toy problem.
    #[serde(default = "default_toy_n")]
    pub toy_n: usize,
    pub rule: Rule,
    /// Number of GP layers `L`.
    pub layers: usize,
    /// Hidden layer widths `D¹ … D^{L-1}`.
    #[serde(default)]
    pub dims: Vec<usize>,
    /// Inducing points per layer.
    pub inducing: Vec<usize>,
    /// Paths (samples or quadrature points) used in training.
    pub samples: usize,
    /// Paths used for validation and testing by the sampling rules.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta")]
    pub beta_reg: f64,
    pub likelihood: LikelihoodKind,
    pub inference_fn: InferenceFn,
    /// Full-covariance `q(u)`; only for one-layer global models.
    #[serde(default)]
    pub full_covariance: bool,
    /// Initial observation noise variance.
    #[serde(default = "default_noise_var")]
    pub init_noise_var: f64,
    #[serde(default = "default_hermite")]
    pub hermite_points: usize,
    /// Validate every this many epochs (and always after the last).
    #[serde(default = "default_one")]
    pub val_every: usize,
    /// Optional global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Layer widths `D⁰ … D^L` given the input dimension.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend(&self.dims);
        d.push(1);
        d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("`layers` must be at least 1".into());
        }
        if self.dims.len() != self.layers - 1 {
            return bad(format!(
                "`dims` needs {} entries for {} layers, got {}",
                self.layers - 1,
                self.layers,
                self.dims.len()
            ));
        }
        if self.dims.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.inducing.len() != self.layers {
            return bad(format!("`inducing` needs {} entries, got {}", self.layers, self.inducing.len()));
        }
        if self.inducing.contains(&0) {
            return bad("inducing counts must be positive".into());
        }
        if self.samples == 0 || self.eval_samples == 0 {
            return bad("`samples` and `eval_samples` must be positive".into());
        }
        if self.batch == 0 || self.val_every == 0 || self.hermite_points == 0 {
            return bad("`batch`, `val_every` and `hermite_points` must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("`lr` must be positive".into());
        }
        if !(self.init_noise_var > 0.0) {
            return bad("`init_noise_var` must be positive".into());
        }
        if !(self.beta_reg >= 0.0) {
            return bad("`beta_reg` must be non-negative".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("`clip_norm` must be positive".into());
            }
        }
        match (self.task, self.likelihood) {
            (Task::Regression, LikelihoodKind::Gaussian) | (Task::Binary, LikelihoodKind::BernoulliProbit) => {}
            _ => return bad("likelihood does not match task".into()),
        }
        if self.rule.predictive_objective() && self.likelihood != LikelihoodKind::Gaussian {
            return bad(format!(
                "{} trains on the predictive likelihood and needs a gaussian likelihood",
                self.rule.name()
            ));
        }
        let global = self.inference_fn == InferenceFn::Global;
        if self.rule.is_amortized() == global {
            return bad(format!("rule {} is incompatible with inference_fn {:?}", self.rule.name(), self.inference_fn));
        }
        if self.full_covariance && !(global && self.layers == 1) {
            return bad("`full_covariance` is only available for one-layer global models".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, as lowercase hex.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> &'static str {
        r#"{"task":"binary","dataset":"toy","rule":"AR2P","layers":3,"dims":[2,2],
            "inducing":[32,16,16],"samples":8,"likelihood":"bernoulli_probit",
            "inference_fn":"affine_mlp"}"#
    }

    #[test]
    fn defaults_fill_in() {
        let c = ModelConfig::from_json(toy()).unwrap();
        assert_eq!((c.lr, c.batch, c.epochs, c.eval_samples), (0.005, 100, 100, 32));
        assert_eq!(c.layer_dims(2), vec![2, 2, 2, 1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = toy().replace("\"samples\":8", "\"samples\":8,\"bogus\":1");
        assert!(matches!(ModelConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn predictive_objective_needs_gaussian() {
        let text = toy().replace("AR2P", "AR2PP");
        assert!(ModelConfig::from_json(&text).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::from_json(toy()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
