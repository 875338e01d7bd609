//! Pipeline configuration file.
//!
//! Sections that name a model's core settings (`seeds`, `reasoner`,
//! `transfer`, `ddm`, `controller`, `paths`) are required, as are their
//! listed keys. Tuning knobs elsewhere default when absent. Unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::Thresholds;
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;
use crate::reasoner::TrainConfig;
use crate::transfer::{GammaMode, TransferConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub reasoner: u64,
    pub transfer: u64,
    pub ppo: u64,
    pub split: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            reasoner: seed,
            transfer: seed,
            ppo: seed,
            split: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonerSection {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Stop once held-out accuracy reaches this value; train all epochs if unset.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl ReasonerSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub c: f64,
    pub gamma: GammaMode,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::yes")]
    pub standardize: bool,
    #[serde(default = "defaults::folds")]
    pub calibration_folds: usize,
}

impl TransferSection {
    pub fn transfer_config(&self, seed: u64) -> TransferConfig {
        TransferConfig {
            c: self.c,
            gamma: self.gamma,
            epsilon: self.epsilon,
            standardize: self.standardize,
            calibration_folds: self.calibration_folds,
            seed,
            ..TransferConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdmSection {
    /// Sigmoid steepness `k`.
    pub k: f64,
    pub lambda: f64,
    /// Frames per second `f`.
    pub f: u32,
}

/// Agent training budgets and environment extras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsSection {
    pub hybrid_steps: usize,
    pub pure_steps: usize,
    /// Training contexts scored after every update for the learning curve.
    pub eval_contexts: usize,
    /// A run has converged once its smoothed mean reward has covered this
    /// fraction of its rise from the first update to its peak.
    pub convergence_fraction: f64,
    pub video_dim: usize,
    pub extractor_seed: u64,
    pub pure_max_trials: usize,
}

impl Default for AgentsSection {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            hybrid_steps: 102_400,
            pure_steps: 102_400,
            eval_contexts: 256,
            convergence_fraction: 0.9,
            video_dim: env.video_dim,
            extractor_seed: env.extractor_seed,
            pure_max_trials: env.pure_max_trials,
        }
    }
}

/// Synthetic participants generated when no dataset path is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub participants_per_group: usize,
    pub n_trials: u32,
    /// Per-participant base response times are spread evenly over this range.
    pub base_rt: (f64, f64),
    pub hardness_weight: f64,
    pub pressure_weight: f64,
    pub noise_sd: f64,
    pub accuracy_floor: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            participants_per_group: 5,
            n_trials: 300,
            base_rt: (2.0, 3.0),
            hardness_weight: 1.5,
            pressure_weight: -0.5,
            noise_sd: 0.3,
            accuracy_floor: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Trial CSV to use instead of synthetic data.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub outputs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Seeds,
    pub reasoner: ReasonerSection,
    pub transfer: TransferSection,
    pub ddm: DdmSection,
    #[serde(default)]
    pub ppo: PpoConfig,
    pub controller: Thresholds,
    #[serde(default)]
    pub agents: AgentsSection,
    #[serde(default)]
    pub synth: SynthSection,
    pub paths: PathsSection,
}

mod defaults {
    pub fn epsilon() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn folds() -> usize {
        3
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let tr = TrainConfig::default();
        Self {
            seeds: Seeds::all(0),
            reasoner: ReasonerSection {
                hidden: tr.hidden,
                epochs: tr.epochs,
                lr: tr.lr,
                batch: tr.batch,
                target_accuracy: Some(0.99),
            },
            transfer: TransferSection {
                c: 1.0,
                gamma: GammaMode::Scale,
                epsilon: defaults::epsilon(),
                standardize: true,
                calibration_folds: defaults::folds(),
            },
            ddm: DdmSection {
                k: env.steepness,
                lambda: env.lambda,
                f: env.frame_rate,
            },
            ppo: PpoConfig::default(),
            controller: Thresholds::default(),
            agents: AgentsSection::default(),
            synth: SynthSection::default(),
            paths: PathsSection {
                dataset: None,
                outputs: PathBuf::from("out"),
            },
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !crate::reasoner::SUPPORTED_HIDDEN.contains(&self.reasoner.hidden) {
            return bad(format!("reasoner.hidden {} unsupported", self.reasoner.hidden));
        }
        if self.reasoner.epochs == 0 || self.reasoner.batch == 0 || !(self.reasoner.lr > 0.0) {
            return bad("reasoner epochs, batch and lr must be positive".into());
        }
        if let Some(t) = self.reasoner.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("reasoner.target_accuracy {t} outside [0, 1]"));
            }
        }
        if !(self.transfer.c > 0.0) || !(self.transfer.epsilon >= 0.0) {
            return bad("transfer.c must be positive and epsilon non-negative".into());
        }
        if let GammaMode::Fixed(g) = self.transfer.gamma {
            if !(g > 0.0) {
                return bad(format!("transfer.gamma {g} must be positive"));
            }
        }
        if !(self.ddm.k > 0.0) {
            return bad(format!("ddm.k {} must be positive", self.ddm.k));
        }
        self.env().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.ppo.n_steps == 0 || self.ppo.minibatch == 0 || self.ppo.epochs == 0 {
            return bad("ppo n_steps, minibatch and epochs must be positive".into());
        }
        if self.agents.eval_contexts == 0 {
            return bad("agents.eval_contexts must be positive".into());
        }
        if !(self.agents.convergence_fraction > 0.0 && self.agents.convergence_fraction <= 1.0) {
            return bad("agents.convergence_fraction must be in (0, 1]".into());
        }
        let s = &self.synth;
        if s.participants_per_group == 0 || s.n_trials == 0 || !(s.base_rt.0 <= s.base_rt.1) {
            return bad("synth needs participants, trials and an ordered base_rt range".into());
        }
        Ok(())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            lambda: self.ddm.lambda,
            frame_rate: self.ddm.f,
            steepness: self.ddm.k,
            video_dim: self.agents.video_dim,
            extractor_seed: self.agents.extractor_seed,
            pure_max_trials: self.agents.pure_max_trials,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            seed: self.seeds.ppo,
            ..self.ppo.clone()
        }
    }

    /// Sha256 of the canonical JSON form, so formatting and key order in the
    /// source file do not matter. The output directory is left out: moving
    /// a run's outputs does not change what produced them.
    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.paths.outputs = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(json).into()
    }

    pub fn hash(&self) -> String {
        hex(&self.hash_bytes())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let good = PipelineConfig::default().to_toml();
        let extra = good.replace("[reasoner]\n", "[reasoner]\nwidth = 3\n");
        assert!(PipelineConfig::from_toml(&extra).is_err());
        let missing = good.replace("[ddm]\nk = 6.0\n", "[ddm]\n");
        assert_ne!(missing, good);
        assert!(PipelineConfig::from_toml(&missing).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seeds.data = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.paths.outputs = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
    }
}
