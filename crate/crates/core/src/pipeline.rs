//! Stage-by-stage orchestration shared by the CLI and the experiment runs.
//!
//! Everything here runs in single precision; the stages themselves are
//! generic over the scalar.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::{PipelineConfig, ReasonerSection, SynthSection};
use crate::controller::Thresholds;
use crate::data::{synth_generate, Group, SynthConfig, SynthProfile, TrialRecord};
use crate::envs::{EnvConfig, EpisodeContext, EpisodeRecord, HybridEnv, PureEnv};
use crate::error::{Error, Result};
use crate::eval::{self, PredictionRow, SplitSpec, Strategy};
use crate::ppo::{self, CurvePoint, PolicyNetwork, PpoConfig};
use crate::reasoner::{self, EpochStats, FeatureVector, ReasonerModel};
use crate::taskgen::{enumerate_all, EncodedQuestion};
use crate::transfer::{self, BaselinePrediction, ChoiceModel, RtModel, TransferConfig, TransferInput};

pub struct ReasonerRun {
    pub model: ReasonerModel<f32>,
    pub curve: Vec<EpochStats>,
    /// Held-out accuracy after each epoch.
    pub held_out: Vec<f64>,
}

impl ReasonerRun {
    pub fn test_accuracy(&self) -> f64 {
        self.held_out.last().copied().unwrap_or(0.0)
    }
}

/// Trains on a seeded 80/20 split of the full enumeration, stopping early
/// once the held-out accuracy reaches the configured target.
pub fn train_reasoner(section: &ReasonerSection, seed: u64) -> Result<ReasonerRun> {
    let (train, test) = reasoner::split_questions(&enumerate_all(), seed);
    let mut held_out = Vec::new();
    let (model, curve) = reasoner::train::<f32, _>(&train, &section.train_config(seed), |s, m| {
        let acc = m.accuracy(&test);
        held_out.push(acc);
        info!(epoch = s.epoch, loss = s.loss, train_acc = s.accuracy, test_acc = acc, "reasoner");
        match section.target_accuracy {
            Some(t) if acc >= t => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    })?;
    Ok(ReasonerRun {
        model,
        curve,
        held_out,
    })
}

/// Generator configs for every group. Participants within a group have base
/// response times spread evenly over the configured range; all groups share
/// the seed, so participant `k` sees the same questions in every group.
pub fn synth_configs(s: &SynthSection, thresholds: Thresholds, seed: u64) -> Vec<SynthConfig> {
    let n = s.participants_per_group;
    Group::ALL
        .iter()
        .map(|&group| SynthConfig {
            profiles: (0..n)
                .map(|k| {
                    let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
                    SynthProfile {
                        participant_id: format!("{group}-{:02}", k + 1),
                        base_rt: s.base_rt.0 + t * (s.base_rt.1 - s.base_rt.0),
                        hardness_weight: s.hardness_weight,
                        pressure_weight: s.pressure_weight,
                        noise_sd: s.noise_sd,
                        accuracy_floor: s.accuracy_floor,
                    }
                })
                .collect(),
            group,
            n_trials: s.n_trials,
            seed,
            thresholds,
        })
        .collect()
}

pub fn synth_dataset(configs: &[SynthConfig]) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for c in configs {
        out.extend(synth_generate(c)?);
    }
    Ok(out)
}

/// Reasoner features of each trial's question, tagged with its trial index.
pub fn transfer_inputs(model: &ReasonerModel<f32>, records: &[TrialRecord]) -> Vec<TransferInput> {
    let encoded: Vec<EncodedQuestion> = records.iter().map(|r| r.question.encode()).collect();
    let feats = model.extract_features_batch(&encoded);
    feats
        .rows()
        .into_iter()
        .zip(records)
        .map(|(row, r)| TransferInput::new(&FeatureVector(row.to_vec()), r.trial_index))
        .collect()
}

pub struct TransferModels {
    pub choice: ChoiceModel,
    pub rt: RtModel,
}

impl TransferModels {
    pub fn predict(&self, inputs: &[TransferInput]) -> Result<Vec<BaselinePrediction>> {
        transfer::predict_baseline(&self.choice, &self.rt, inputs)
    }
}

/// Fits the baseline models on the no-pressure rows among `train`, which is
/// the behaviour the baseline is meant to describe. Falls back to all of
/// `train` when those rows cannot support a classifier. Also returns the
/// number of rows used.
pub fn fit_transfer(
    records: &[TrialRecord],
    inputs: &[TransferInput],
    train: &[usize],
    cfg: &TransferConfig,
) -> Result<(TransferModels, usize)> {
    let calm: Vec<usize> = train.iter().copied().filter(|&i| !records[i].pressure_shown).collect();
    let both_classes = |idx: &[usize]| {
        idx.iter().any(|&i| records[i].human_choice) && idx.iter().any(|&i| !records[i].human_choice)
    };
    let rows = if calm.len() >= 2 * cfg.calibration_folds.max(1) && both_classes(&calm) {
        calm
    } else {
        tracing::warn!(n = calm.len(), "too few no-pressure rows; fitting on all training rows");
        train.to_vec()
    };
    let cls: Vec<(TransferInput, bool)> =
        rows.iter().map(|&i| (inputs[i].clone(), records[i].human_choice)).collect();
    let reg: Vec<(TransferInput, f64)> =
        rows.iter().map(|&i| (inputs[i].clone(), records[i].rt_seconds)).collect();
    let choice = transfer::fit_classifier(&cls, cfg)?;
    let rt = transfer::fit_regressor(&reg, cfg)?;
    info!(rows = rows.len(), sv_choice = choice.n_support(), sv_rt = rt.n_support(), "transfer fit");
    Ok((TransferModels { choice, rt }, rows.len()))
}

pub fn build_contexts(
    records: &[TrialRecord],
    baselines: &[BaselinePrediction],
    idx: &[usize],
    env: &EnvConfig,
) -> Result<Vec<EpisodeContext>> {
    idx.iter()
        .map(|&i| EpisodeContext::new(records[i].clone(), baselines[i], env))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Hybrid,
    Pure,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Hybrid => "hybrid",
            AgentKind::Pure => "pure",
        })
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(AgentKind::Hybrid),
            "pure" => Ok(AgentKind::Pure),
            other => Err(Error::invalid(format!("unknown agent {other:?}; use hybrid or pure"))),
        }
    }
}

/// Deterministic response-time estimates of a policy.
pub fn hybrid_predict(
    policy: &PolicyNetwork<f32>,
    contexts: Vec<EpisodeContext>,
) -> Result<Vec<EpisodeRecord>> {
    let n = contexts.len();
    let mut env = HybridEnv::<f32>::new(contexts, 0)?;
    (0..n)
        .map(|i| env.run_episode(i, |obs| policy.act_deterministic(obs)))
        .collect()
}

pub fn pure_predict(policy: &PolicyNetwork<f32>, env: &PureEnv<f32>) -> Vec<f64> {
    (0..env.contexts().len())
        .map(|i| {
            let a = policy.act_deterministic(&env.observation(i));
            PureEnv::<f32>::response_time(&env.contexts()[i], a)
        })
        .collect()
}

fn contexts_mape(contexts: &[EpisodeContext], pred: &[f64]) -> Result<f64> {
    let truth: Vec<f64> = contexts.iter().map(|c| c.r_u()).collect();
    eval::mape(pred, &truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPoint {
    pub point: CurvePoint,
    /// Wall seconds spent collecting and updating, excluding evaluation.
    pub train_seconds: f64,
}

pub struct AgentRun {
    pub kind: AgentKind,
    pub policy: PolicyNetwork<f32>,
    pub curve: Vec<TrainingPoint>,
}

impl AgentRun {
    /// Training time until the smoothed mean reward (trailing window of
    /// `SMOOTH` updates, skipping updates where no episode finished) first
    /// covers `frac` of its rise from the first update to its peak.
    pub fn convergence_seconds(&self, frac: f64) -> Option<f64> {
        const SMOOTH: usize = 5;
        let r: Vec<f64> = self.curve.iter().map(|p| p.point.mean_reward).collect();
        let smooth: Vec<f64> = (0..r.len())
            .map(|i| {
                let w: Vec<f64> = r[(i + 1).saturating_sub(SMOOTH)..=i]
                    .iter()
                    .copied()
                    .filter(|x| x.is_finite())
                    .collect();
                if w.is_empty() {
                    f64::NAN
                } else {
                    w.iter().sum::<f64>() / w.len() as f64
                }
            })
            .collect();
        let first = smooth.iter().copied().find(|x| x.is_finite())?;
        let peak = smooth.iter().copied().filter(|x| x.is_finite()).fold(first, f64::max);
        let target = first + frac * (peak - first);
        smooth
            .iter()
            .position(|&s| s >= target)
            .map(|i| self.curve[i].train_seconds)
    }

    pub fn train_seconds(&self) -> f64 {
        self.curve.last().map_or(0.0, |p| p.train_seconds)
    }
}

/// Trains one agent on `contexts`. After every update the deterministic
/// policy is scored (MAPE) on a seeded subset of `eval_n` training contexts;
/// that time is excluded from `train_seconds`.
pub fn train_agent(
    kind: AgentKind,
    contexts: Vec<EpisodeContext>,
    env_cfg: &EnvConfig,
    ppo_cfg: &PpoConfig,
    total_steps: usize,
    eval_n: usize,
) -> Result<AgentRun> {
    let mut pick: Vec<usize> = (0..contexts.len()).collect();
    pick.shuffle(&mut ChaCha8Rng::seed_from_u64(ppo_cfg.seed.wrapping_add(3)));
    pick.truncate(eval_n.max(1));
    let eval_ctx: Vec<EpisodeContext> = pick.iter().map(|&i| contexts[i].clone()).collect();

    let mut eval_time = 0.0;
    let mut eval_seconds = Vec::new();
    let (policy, curve) = match kind {
        AgentKind::Hybrid => {
            let mut env = HybridEnv::<f32>::new(contexts, ppo_cfg.seed)?;
            let policy = PolicyNetwork::new(crate::envs::HYBRID_OBS_DIM, ppo_cfg.seed)?;
            let mut err = None;
            let out = ppo::train(&mut env, policy, ppo_cfg, total_steps, |pt, pol| {
                let t0 = Instant::now();
                let score = hybrid_predict(pol, eval_ctx.clone()).and_then(|eps| {
                    let pred: Vec<f64> = eps.iter().map(|e| e.r_rl).collect();
                    contexts_mape(&eval_ctx, &pred)
                });
                eval_seconds.push(eval_time);
                eval_time += t0.elapsed().as_secs_f64();
                log_point(kind, pt, &score);
                match score {
                    Ok(m) => ControlFlow::Continue(Some(m)),
                    Err(e) => {
                        err = Some(e);
                        ControlFlow::Break(None)
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            out
        }
        AgentKind::Pure => {
            let mut env = PureEnv::<f32>::new(contexts, env_cfg)?;
            let eval_env = PureEnv::<f32>::new(eval_ctx.clone(), env_cfg)?;
            let policy = PolicyNetwork::new(env.obs_len(), ppo_cfg.seed)?;
            let out = ppo::train(&mut env, policy, ppo_cfg, total_steps, |pt, pol| {
                let t0 = Instant::now();
                let score = contexts_mape(&eval_ctx, &pure_predict(pol, &eval_env));
                eval_seconds.push(eval_time);
                eval_time += t0.elapsed().as_secs_f64();
                log_point(kind, pt, &score);
                ControlFlow::Continue(score.ok())
            })?;
            out
        }
    };
    let curve = curve
        .into_iter()
        .zip(eval_seconds)
        .map(|(point, spent)| TrainingPoint {
            train_seconds: point.wall_seconds - spent,
            point,
        })
        .collect();
    Ok(AgentRun {
        kind,
        policy,
        curve,
    })
}

fn log_point(kind: AgentKind, pt: &CurvePoint, score: &Result<f64>) {
    info!(
        agent = %kind,
        step = pt.step,
        mean_reward = pt.mean_reward,
        mape = score.as_ref().ok().copied().unwrap_or(f64::NAN),
        seconds = pt.wall_seconds,
        "ppo"
    );
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    pub group: String,
    pub n: usize,
    pub baseline: f64,
    pub hybrid: Option<f64>,
    pub pure: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSummary {
    pub steps: usize,
    pub train_seconds: f64,
    pub convergence_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub n_train: usize,
    pub n_test: usize,
    pub transfer_rows: usize,
    pub choice_accuracy: f64,
    pub groups: Vec<GroupScore>,
    pub overall: GroupScore,
    pub hybrid: AgentSummary,
    pub pure: AgentSummary,
}

pub struct Experiment {
    pub report: ExperimentReport,
    pub rows: Vec<PredictionRow>,
    pub episodes: Vec<EpisodeRecord>,
    pub transfer: TransferModels,
    pub hybrid: AgentRun,
    pub pure: AgentRun,
}

/// Full run on `records` with a general 80/20 split: baseline fit, both
/// agents trained on the training contexts, scored per group on the test
/// contexts.
pub fn run_experiment(
    cfg: &PipelineConfig,
    reasoner: &ReasonerModel<f32>,
    records: &[TrialRecord],
) -> Result<Experiment> {
    let fold = &general_fold(records, cfg.seeds.split)?;
    let inputs = transfer_inputs(reasoner, records);
    let (tmodels, transfer_rows) = fit_transfer(records, &inputs, &fold.train, &cfg.transfer.transfer_config(cfg.seeds.transfer))?;
    let baselines = tmodels.predict(&inputs)?;
    let env = cfg.env();
    let train_ctx = build_contexts(records, &baselines, &fold.train, &env)?;
    let test_ctx = build_contexts(records, &baselines, &fold.test, &env)?;

    let ppo_cfg = cfg.ppo_config();
    let a = &cfg.agents;
    let hybrid = train_agent(AgentKind::Hybrid, train_ctx.clone(), &env, &ppo_cfg, a.hybrid_steps, a.eval_contexts)?;
    let pure = train_agent(AgentKind::Pure, train_ctx, &env, &ppo_cfg, a.pure_steps, a.eval_contexts)?;

    let (rows, episodes) = predict_rows(&fold.name, &test_ctx, &hybrid.policy, Some(&pure.policy), &env)?;

    let choice_pred: Vec<bool> = fold.test.iter().map(|&i| baselines[i].choice).collect();
    let choice_truth: Vec<bool> = fold.test.iter().map(|&i| records[i].human_choice).collect();
    let choice_accuracy = eval::classification(&choice_pred, &choice_truth)?.accuracy;

    let (groups, overall) = group_scores(&rows)?;
    let summary = |run: &AgentRun, steps| AgentSummary {
        steps,
        train_seconds: run.train_seconds(),
        convergence_seconds: run.convergence_seconds(a.convergence_fraction),
    };
    let report = ExperimentReport {
        config_hash: cfg.hash(),
        n_train: fold.train.len(),
        n_test: fold.test.len(),
        transfer_rows,
        choice_accuracy,
        groups,
        overall,
        hybrid: summary(&hybrid, a.hybrid_steps),
        pure: summary(&pure, a.pure_steps),
    };
    Ok(Experiment {
        report,
        rows,
        episodes,
        transfer: tmodels,
        hybrid,
        pure,
    })
}

/// MAPE of each model column, per group and over all rows.
pub fn group_scores(rows: &[PredictionRow]) -> Result<(Vec<GroupScore>, GroupScore)> {
    let mut by_group: BTreeMap<Group, Vec<PredictionRow>> = BTreeMap::new();
    for r in rows {
        by_group.entry(r.group).or_default().push(r.clone());
    }
    let groups = by_group
        .iter()
        .map(|(g, rs)| group_score(g.as_str(), rs))
        .collect::<Result<Vec<_>>>()?;
    Ok((groups, group_score("all", rows)?))
}

fn group_score(name: &str, rows: &[PredictionRow]) -> Result<GroupScore> {
    let truth: Vec<f64> = rows.iter().map(|r| r.truth).collect();
    let col = |f: fn(&PredictionRow) -> Option<f64>| -> Result<Option<f64>> {
        let pred: Option<Vec<f64>> = rows.iter().map(f).collect();
        pred.map(|p| eval::mape(&p, &truth)).transpose()
    };
    Ok(GroupScore {
        group: name.into(),
        n: rows.len(),
        baseline: col(|r| Some(r.baseline))?.unwrap_or(f64::NAN),
        hybrid: col(|r| r.hybrid)?,
        pure: col(|r| r.pure)?,
    })
}

/// The single 80/20 fold used for fitting and training outside `evaluate`.
pub fn general_fold(records: &[TrialRecord], seed: u64) -> Result<eval::Fold> {
    Ok(eval::split(records, &SplitSpec::new(Strategy::General, seed))?.remove(0))
}

/// Test-set rows for `contexts` (baseline, hybrid and optionally pure) plus
/// the hybrid episodes behind them.
pub fn predict_rows(
    fold: &str,
    contexts: &[EpisodeContext],
    hybrid: &PolicyNetwork<f32>,
    pure: Option<&PolicyNetwork<f32>>,
    env: &EnvConfig,
) -> Result<(Vec<PredictionRow>, Vec<EpisodeRecord>)> {
    let episodes = hybrid_predict(hybrid, contexts.to_vec())?;
    let pure_pred = match pure {
        Some(p) => Some(pure_predict(p, &PureEnv::<f32>::new(contexts.to_vec(), env)?)),
        None => None,
    };
    let rows = contexts
        .iter()
        .zip(&episodes)
        .enumerate()
        .map(|(i, (c, ep))| PredictionRow {
            fold: fold.into(),
            participant_id: c.trial.participant_id.clone(),
            group: c.trial.group,
            trial_index: c.trial.trial_index,
            truth: c.r_u(),
            baseline: c.baseline.r_t,
            hybrid: Some(ep.r_rl),
            pure: pure_pred.as_ref().map(|p| p[i]),
        })
        .collect();
    Ok((rows, episodes))
}

/// Learning curve with the evaluation MAPE and training-only seconds.
pub fn write_training_curve<W: std::io::Write>(curve: &[TrainingPoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "step",
        "mean_reward",
        "policy_loss",
        "value_loss",
        "eval_mape",
        "wall_seconds",
        "train_seconds",
    ])?;
    for p in curve {
        let c = &p.point;
        wtr.write_record([
            c.step.to_string(),
            c.mean_reward.to_string(),
            c.policy_loss.to_string(),
            c.value_loss.to_string(),
            c.eval.map_or(String::new(), |e| e.to_string()),
            c.wall_seconds.to_string(),
            p.train_seconds.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
