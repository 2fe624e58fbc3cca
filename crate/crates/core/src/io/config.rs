//! Experiment configuration in TOML.
//!
//! Every key is optional; a missing key takes its default. Unknown keys are
//! rejected. Layout:
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! output_dir = "runs"
//! target_angles_deg = [[-60.0, 65.0], [-20.0, 75.0], [20.0, 55.0], [60.0, 70.0]]
//! adapt_sequence = [1, 2, 3, 4]
//!
//! [env]        # dt, horizon, v_max_deg, limit1_deg, limit2_deg, link1, link2, substeps
//! [policy]     # hidden, init_log_std
//! [pcrpo]      # h_minus, h_plus, eta, x_r, x_c, clip_eps, epochs, minibatch_size, ...
//! [gae]        # gamma, lambda_gae, normalize
//! [ewc]        # lambda, fisher_samples
//! [pretrain]   # n_iterations, episodes_per_batch, cost_limit, profile, reward_source
//! [adapt]      # same keys as [pretrain]
//! [eval]       # episodes_per_target, profile
//! [[profiles]] # name, noise_pct, stiffness, damping
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{forward_kinematics, DomainProfile, EnvConfig, RewardSource, Vec3};
use crate::error::{Error, Result};
use crate::numcore::MlpSpec;
use crate::pcrpo::{OptimizerKind, PcrpoConfig};
use crate::rollout::GaeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_log_std: 0.5f64.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda: f64,
    /// Buffer size for the Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            fisher_samples: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub n_iterations: usize,
    pub episodes_per_batch: usize,
    pub cost_limit: f64,
    /// Name of an entry in `profiles`.
    pub profile: String,
    pub reward_source: RewardSource,
    /// Overrides `pcrpo.epochs` in this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Overrides `pcrpo.minibatch_size` in this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
    /// Overrides `pcrpo.eta` in this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Overrides `pcrpo.policy_optimizer` in this phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_optimizer: Option<OptimizerKind>,
}

impl PhaseConfig {
    pub fn pretrain_default() -> Self {
        Self {
            n_iterations: 200,
            episodes_per_batch: 64,
            cost_limit: 0.12,
            profile: "randomized".into(),
            reward_source: RewardSource::TrueState,
            epochs: None,
            minibatch_size: None,
            eta: None,
            policy_optimizer: None,
        }
    }

    pub fn adapt_default() -> Self {
        Self {
            n_iterations: 10,
            episodes_per_batch: 10,
            cost_limit: 0.012,
            profile: "realistic".into(),
            reward_source: RewardSource::Observation,
            epochs: Some(10),
            minibatch_size: Some(250),
            eta: Some(0.02),
            policy_optimizer: Some(OptimizerKind::Sgd),
        }
    }

    /// `base` with this phase's cost limit and overrides applied.
    pub fn pcrpo(&self, base: &PcrpoConfig) -> PcrpoConfig {
        PcrpoConfig {
            cost_limit: self.cost_limit,
            epochs: self.epochs.unwrap_or(base.epochs),
            minibatch_size: self.minibatch_size.unwrap_or(base.minibatch_size),
            eta: self.eta.unwrap_or(base.eta),
            policy_optimizer: self.policy_optimizer.unwrap_or(base.policy_optimizer),
            ..base.clone()
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::validation(
                format!("{section}.n_iterations"),
                "must be >= 1",
            ));
        }
        if self.episodes_per_batch == 0 {
            return Err(Error::validation(
                format!("{section}.episodes_per_batch"),
                "must be >= 1",
            ));
        }
        if !(self.cost_limit.is_finite() && self.cost_limit >= 0.0) {
            return Err(Error::validation(
                format!("{section}.cost_limit"),
                format!("must be >= 0, got {}", self.cost_limit),
            ));
        }
        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(Error::validation(
                    format!("{section}.eta"),
                    "must be positive",
                ));
            }
        }
        if self.epochs == Some(0) {
            return Err(Error::validation(
                format!("{section}.epochs"),
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// A phase table with every key optional; missing keys come from the
/// phase's own defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialPhase {
    n_iterations: Option<usize>,
    episodes_per_batch: Option<usize>,
    cost_limit: Option<f64>,
    profile: Option<String>,
    reward_source: Option<RewardSource>,
    epochs: Option<usize>,
    minibatch_size: Option<usize>,
    eta: Option<f64>,
    policy_optimizer: Option<OptimizerKind>,
}

impl PartialPhase {
    fn merge(self, d: PhaseConfig) -> PhaseConfig {
        PhaseConfig {
            n_iterations: self.n_iterations.unwrap_or(d.n_iterations),
            episodes_per_batch: self.episodes_per_batch.unwrap_or(d.episodes_per_batch),
            cost_limit: self.cost_limit.unwrap_or(d.cost_limit),
            profile: self.profile.unwrap_or(d.profile),
            reward_source: self.reward_source.unwrap_or(d.reward_source),
            epochs: self.epochs.or(d.epochs),
            minibatch_size: self.minibatch_size.or(d.minibatch_size),
            eta: self.eta.or(d.eta),
            policy_optimizer: self.policy_optimizer.or(d.policy_optimizer),
        }
    }
}

fn pretrain_phase<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<PhaseConfig, D::Error> {
    Ok(PartialPhase::deserialize(d)?.merge(PhaseConfig::pretrain_default()))
}

fn adapt_phase<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<PhaseConfig, D::Error> {
    Ok(PartialPhase::deserialize(d)?.merge(PhaseConfig::adapt_default()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_target: usize,
    pub profile: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_target: 10,
            profile: "realistic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// `(yaw, pitch)` per target; positions follow from forward kinematics.
    pub target_angles_deg: Vec<[f64; 2]>,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub pcrpo: PcrpoConfig,
    pub gae: GaeConfig,
    pub ewc: EwcConfig,
    /// 1-based target ids visited in order while adapting.
    pub adapt_sequence: Vec<usize>,
    #[serde(deserialize_with = "pretrain_phase")]
    pub pretrain: PhaseConfig,
    #[serde(deserialize_with = "adapt_phase")]
    pub adapt: PhaseConfig,
    pub eval: EvalConfig,
    pub profiles: Vec<DomainProfile>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs".into(),
            target_angles_deg: vec![[-60.0, 65.0], [-20.0, 75.0], [20.0, 55.0], [60.0, 70.0]],
            adapt_sequence: vec![1, 2, 3, 4],
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            pcrpo: PcrpoConfig::default(),
            gae: GaeConfig::default(),
            ewc: EwcConfig::default(),
            pretrain: PhaseConfig::pretrain_default(),
            adapt: PhaseConfig::adapt_default(),
            eval: EvalConfig::default(),
            profiles: vec![DomainProfile::randomized(), DomainProfile::realistic()],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.pretrain.validate("pretrain")?;
        self.adapt.validate("adapt")?;
        let mut pcrpo = self.pcrpo.clone();
        pcrpo.cost_limit = self.pretrain.cost_limit;
        pcrpo.validate()?;
        self.gae.validate()?;
        if self.policy.hidden.is_empty() || self.policy.hidden.contains(&0) {
            return Err(Error::validation(
                "policy.hidden",
                "need at least one non-empty layer",
            ));
        }
        if !self.policy.init_log_std.is_finite() {
            return Err(Error::validation("policy.init_log_std", "must be finite"));
        }
        if !(self.ewc.lambda.is_finite() && self.ewc.lambda >= 0.0) {
            return Err(Error::validation("ewc.lambda", "must be >= 0"));
        }
        if self.ewc.fisher_samples == 0 {
            return Err(Error::validation("ewc.fisher_samples", "must be >= 1"));
        }
        if self.target_angles_deg.is_empty() {
            return Err(Error::validation(
                "target_angles_deg",
                "need at least one target",
            ));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if self.profiles[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::validation(
                    "profiles",
                    format!("duplicate name {:?}", p.name),
                ));
            }
        }
        for (section, name) in [
            ("pretrain.profile", &self.pretrain.profile),
            ("adapt.profile", &self.adapt.profile),
            ("eval.profile", &self.eval.profile),
        ] {
            self.profile(name)
                .map_err(|_| Error::validation(section, format!("unknown profile {name:?}")))?;
        }
        let n = self.target_angles_deg.len();
        if self.adapt_sequence.is_empty() {
            return Err(Error::validation("adapt_sequence", "must not be empty"));
        }
        if let Some(bad) = self.adapt_sequence.iter().find(|&&id| id == 0 || id > n) {
            return Err(Error::validation(
                "adapt_sequence",
                format!("target id {bad} outside 1..={n}"),
            ));
        }
        if self.eval.episodes_per_target == 0 {
            return Err(Error::validation(
                "eval.episodes_per_target",
                "must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Result<&DomainProfile> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown domain profile {name:?}")))
    }

    pub fn targets(&self) -> Vec<Vec3> {
        self.target_angles_deg
            .iter()
            .map(|[yaw, pitch]| forward_kinematics(yaw.to_radians(), pitch.to_radians(), &self.env))
            .collect()
    }

    pub fn target_ids(&self) -> Vec<usize> {
        (1..=self.target_angles_deg.len()).collect()
    }

    pub fn policy_spec(&self) -> MlpSpec {
        MlpSpec::new(
            crate::env::OBS_DIM,
            self.policy.hidden.clone(),
            crate::env::ACTION_DIM,
        )
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec::new(crate::env::OBS_DIM, self.policy.hidden.clone(), 1)
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&fs::read_to_string(path)?)
}

pub fn save_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_toml()?)?;
    Ok(())
}
