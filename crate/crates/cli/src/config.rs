//! Run configuration: a strict TOML document with one section per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use robustdiff::consistency::{CdConfig, DistanceMetric, OdeSolverKind, PerturbBranch};
use robustdiff::training::{AtConfig, DeltaReset, LossWeight, PerturbNorm, PerturbScope};
use robustdiff::{DatasetKind, ModelConfig, Parameterization, SamplerConfig, ScheduleKind, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Cosine,
            steps: 100,
        }
    }
}

/// Adversarial settings; `enabled = false` trains with the standard loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtSection {
    pub enabled: bool,
    pub k: usize,
    pub adv_lr: f64,
    pub norm: PerturbNorm,
    pub scope: PerturbScope,
    pub delta_reset: DeltaReset,
    pub radius: Option<f64>,
}

impl Default for AtSection {
    fn default() -> Self {
        AtSection::from_config(false, &AtConfig::default())
    }
}

impl AtSection {
    pub fn from_config(enabled: bool, at: &AtConfig) -> Self {
        AtSection {
            enabled,
            k: at.k,
            adv_lr: at.adv_lr,
            norm: at.norm,
            scope: at.scope,
            delta_reset: at.delta_reset,
            radius: at.radius,
        }
    }

    pub fn config(&self) -> AtConfig {
        AtConfig {
            k: self.k,
            adv_lr: self.adv_lr,
            norm: self.norm,
            scope: self.scope,
            delta_reset: self.delta_reset,
            radius: self.radius,
        }
    }

    /// The adversarial configuration when enabled.
    pub fn active(&self) -> Option<AtConfig> {
        self.enabled.then(|| self.config())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdSection {
    /// Teacher checkpoint path, or `oracle:gaussian(mu,sigma)`.
    pub teacher: Option<String>,
    pub solver: OdeSolverKind,
    pub metric: DistanceMetric,
    pub ema_mu: f64,
    pub perturb_branch: PerturbBranch,
    pub loss_weight: LossWeight,
    /// Skip/output mixing; when absent, a scaled form with the data standard
    /// deviation and unit maximum scale is used and written back.
    pub parameterization: Option<Parameterization>,
    /// Rows per step when estimating the final distillation loss.
    pub eval_rows: usize,
}

impl Default for CdSection {
    fn default() -> Self {
        let cd = CdConfig::default();
        CdSection {
            teacher: None,
            solver: cd.solver,
            metric: cd.metric,
            ema_mu: cd.ema_mu,
            perturb_branch: cd.perturb_branch,
            loss_weight: cd.loss_weight,
            parameterization: None,
            eval_rows: 512,
        }
    }
}

impl CdSection {
    pub fn config(&self) -> CdConfig {
        CdConfig {
            solver: self.solver,
            metric: self.metric,
            ema_mu: self.ema_mu,
            perturb_branch: self.perturb_branch,
            loss_weight: self.loss_weight.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 100_000,
            seed: 0,
            dataset: DatasetKind::mixture_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    /// Updates between metric snapshots; 0 disables them.
    pub eval_every: u64,
    /// Updates between checkpoints; 0 writes only the final one. Must be a
    /// multiple of `eval_every` when both are set.
    pub checkpoint_every: u64,
    pub eval_samples: usize,
    pub eval_projections: usize,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: PathBuf::from("run"),
            eval_every: 1000,
            checkpoint_every: 0,
            eval_samples: 2000,
            eval_projections: 64,
        }
    }
}

/// Starting weights for fine-tuning.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    /// Noise-prediction checkpoint whose EMA weights initialize training;
    /// relative paths are taken from the configuration file's directory.
    pub from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub at: AtSection,
    #[serde(default)]
    pub cd: CdSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: ScheduleSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            init: InitSection::default(),
            at: AtSection::default(),
            cd: CdSection::default(),
            sampler: SamplerConfig::default(),
            data: DataSection::default(),
            io: IoSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fully resolved TOML, including every default.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: robustdiff::Error| CliError::Config(e.to_string());
        if self.schedule.steps == 0 {
            return Err(CliError::Config("schedule.steps must be positive".into()));
        }
        self.model.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        if self.at.enabled {
            self.at.config().validate().map_err(config)?;
        }
        self.data.dataset.validate().map_err(config)?;
        self.sampler.validate(self.schedule.steps).map_err(config)?;
        if self.data.n == 0 {
            return Err(CliError::Config("data.n must be positive".into()));
        }
        let io = &self.io;
        if io.eval_every > 0 && io.checkpoint_every > 0 && io.checkpoint_every % io.eval_every != 0 {
            return Err(CliError::Config(format!(
                "io.checkpoint_every ({}) must be a multiple of io.eval_every ({})",
                io.checkpoint_every, io.eval_every
            )));
        }
        if io.eval_samples == 0 || io.eval_projections == 0 {
            return Err(CliError::Config("io.eval_samples and io.eval_projections must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_reparses_identically() {
        let mut cfg = RunConfig::default();
        cfg.at.enabled = true;
        cfg.cd.teacher = Some("oracle:gaussian(2,0.5)".into());
        cfg.cd.parameterization = Some(Parameterization::Scaled {
            sigma_data: 0.1 + 0.2,
            s_max: 1.0,
        });
        cfg.data.dataset = DatasetKind::Gaussian1d { mu: 2.0, sigma: 0.5 };
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "[train]\nlearning_rate = 0.1\n",
            "[bogus]\nx = 1\n",
            "[at]\nenabled = true\nalpha = 0.1\n",
            "[data.dataset]\nkind = \"gaussian_1d\"\nmean = 2.0\n",
        ] {
            let err = RunConfig::parse(doc).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{doc}: {err}");
        }
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let err = RunConfig::parse("[train]\nlr = 0.1\nbatchsize = 3\n").unwrap_err().to_string();
        assert!(err.contains("batchsize"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn semantic_checks() {
        assert!(RunConfig::parse("[at]\nenabled = true\nk = 0\n").is_err());
        assert!(RunConfig::parse("[sampler]\nnfe = 500\n").is_err());
        assert!(RunConfig::parse("[io]\neval_every = 300\ncheckpoint_every = 500\n").is_err());
        // Invalid adversarial settings are tolerated while disabled.
        assert!(RunConfig::parse("[at]\nk = 0\n").is_ok());
    }
}
