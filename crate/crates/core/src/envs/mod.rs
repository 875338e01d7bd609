//! Episodic environments in which a policy modulates baseline response
//! times.
//!
//! * [`HybridEnv`]: one step per stimulus frame; each action biases the
//!   evidence accumulator and the episode ends when evidence reaches the
//!   boundary.
//! * [`PureEnv`]: one step per trial; each action offsets the baseline
//!   response time directly.
//!
//! Both are driven by [`EpisodeContext`]s: a dataset trial together with its
//! transfer-model baseline and evidence trajectory.

mod hybrid;
mod pure;
mod video;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::TrialRecord;
use crate::ddm::{EvidenceTrajectory, DEFAULT_STEEPNESS, MAX_RT};
use crate::error::{Error, Result};
use crate::taskgen::ENCODED_LEN;
use crate::transfer::BaselinePrediction;

pub use hybrid::{HybridEnv, HybridEpisode, HYBRID_OBS_DIM};
pub use pure::PureEnv;
pub use video::{extract_video_features, FrameExtractor, RandomConvExtractor, VIDEO_FRAMES};

/// Floor on the baseline error so a perfect baseline does not divide by zero.
pub const E_SVM_FLOOR: f64 = 1e-6;
pub const OVERRUN_PENALTY: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Scale on the per-frame evidence bias.
    pub lambda: f64,
    pub frame_rate: u32,
    pub steepness: f64,
    /// Per-frame feature width for the pure agent's video input.
    pub video_dim: usize,
    pub extractor_seed: u64,
    /// Trials per pure-agent episode.
    pub pure_max_trials: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            frame_rate: 5,
            steepness: DEFAULT_STEEPNESS,
            video_dim: 128,
            extractor_seed: 0,
            pure_max_trials: 60,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        if self.frame_rate < 1 {
            return Err(Error::invalid("frame_rate must be >= 1"));
        }
        if self.video_dim < 1 || self.pure_max_trials < 1 {
            return Err(Error::invalid("video_dim and pure_max_trials must be >= 1"));
        }
        Ok(())
    }

    /// `N_max = RT_max * f`.
    pub fn max_steps(&self) -> usize {
        (MAX_RT * self.frame_rate as f64).round() as usize
    }

    pub fn pure_obs_dim(&self) -> usize {
        ENCODED_LEN + VIDEO_FRAMES * self.video_dim
    }
}

/// One dataset trial with its precomputed baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeContext {
    pub trial: TrialRecord,
    pub baseline: BaselinePrediction,
    pub trajectory: EvidenceTrajectory<f64>,
    pub lambda: f64,
    pub frame_rate: u32,
    pub max_steps: usize,
}

impl EpisodeContext {
    pub fn new(trial: TrialRecord, baseline: BaselinePrediction, cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let trajectory =
            EvidenceTrajectory::build(baseline.r_p, baseline.r_t, cfg.frame_rate, cfg.steepness)?;
        Ok(Self {
            trial,
            baseline,
            trajectory,
            lambda: cfg.lambda,
            frame_rate: cfg.frame_rate,
            max_steps: cfg.max_steps(),
        })
    }

    /// Observed human response time.
    pub fn r_u(&self) -> f64 {
        self.trial.rt_seconds
    }

    pub fn trial_id(&self) -> String {
        format!("{}-{}", self.trial.participant_id, self.trial.trial_index)
    }
}

/// Terminal reward shared by both agents.
///
/// With `E = |R - R_u| / R_u`, returns `(E_svm - E_rl) / E_svm` when the
/// agent beats the baseline and 0 otherwise, plus -1 on a range overrun.
pub fn reward(r_rl: f64, r_u: f64, r_svm: f64, overrun: bool) -> Result<f64> {
    if !(r_u > 0.0 && r_u.is_finite()) {
        return Err(Error::invalid(format!("human rt must be > 0, got {r_u}")));
    }
    if !(r_svm > 0.0 && r_rl.is_finite()) {
        return Err(Error::invalid(format!(
            "baseline rt must be > 0 and agent rt finite, got {r_svm} / {r_rl}"
        )));
    }
    let e_rl = (r_rl - r_u).abs() / r_u;
    let e_svm = ((r_svm - r_u).abs() / r_u).max(E_SVM_FLOOR);
    let gain = if e_rl < e_svm {
        (e_svm - e_rl) / e_svm
    } else {
        0.0
    };
    Ok(gain + if overrun { OVERRUN_PENALTY } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Agent response time, set on the step that produces one.
    pub r_rl: Option<f64>,
    pub penalty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub obs: Vec<T>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Minimal episodic interface used by the PPO trainer.
pub trait Environment<T> {
    fn obs_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<T>>;
    /// Actions outside `[-1, 1]` are clamped.
    fn step(&mut self, action: f64) -> Result<Transition<T>>;
}

/// One finished hybrid episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub trial_id: String,
    pub actions: Vec<f64>,
    pub steps: usize,
    pub r_rl: f64,
    pub reward: f64,
    pub delta_p: f64,
    /// `delta_p * cumsum(actions)`.
    pub effect_trajectory: Vec<f64>,
}

impl EpisodeRecord {
    pub fn effect(actions: &[f64], delta_p: f64) -> Vec<f64> {
        let mut sum = 0.0;
        actions
            .iter()
            .map(|a| {
                sum += a;
                delta_p * sum
            })
            .collect()
    }
}

pub fn write_episode_csv<W: Write>(records: &[EpisodeRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["trial_id", "steps", "r_rl", "reward", "actions"])?;
    for r in records {
        let actions: Vec<String> = r.actions.iter().map(|a| format!("{a:.6}")).collect();
        wtr.write_record([
            r.trial_id.clone(),
            r.steps.to_string(),
            r.r_rl.to_string(),
            r.reward.to_string(),
            actions.join(";"),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
