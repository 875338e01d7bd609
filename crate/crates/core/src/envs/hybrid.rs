use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{reward, EpisodeContext, EpisodeRecord, Environment, StepInfo, Transition};
use crate::ddm::MAX_RT;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stimuli::{render_frame, BAR_UNITS, FRAME_LEN};
use crate::taskgen::ENCODED_LEN;

pub const HYBRID_OBS_DIM: usize = ENCODED_LEN + FRAME_LEN;

/// Flattened frames: index 0 is blank, `1 + u` is a pressure bar with `u`
/// filled units.
fn frame_table<T: Scalar>() -> Vec<Vec<T>> {
    let mut out = vec![vec![T::zero(); FRAME_LEN]];
    for u in 0..BAR_UNITS {
        let f = render_frame(u as f64, true).expect("valid time");
        out.push(f.pixels().iter().map(|&v| T::lit(f64::from(v))).collect());
    }
    out
}

/// State of one frame-level episode. Holds no reference to its context, so
/// callers pass the same context to every call.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridEpisode {
    step: usize,
    bias: f64,
    actions: Vec<f64>,
    done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridOutcome {
    pub reward: f64,
    pub done: bool,
    pub r_rl: Option<f64>,
    pub penalty: bool,
}

impl HybridEpisode {
    pub fn new() -> Self {
        Self {
            step: 0,
            bias: 0.0,
            actions: Vec::new(),
            done: false,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Evidence after the current step.
    pub fn accumulator(&self, ctx: &EpisodeContext) -> f64 {
        ctx.trajectory.at(self.step) + self.bias
    }

    /// Stimulus time of the frame shown at the current step.
    pub fn frame_time(&self, ctx: &EpisodeContext) -> f64 {
        self.step as f64 / ctx.frame_rate as f64
    }

    pub fn advance(&mut self, ctx: &EpisodeContext, action: f64) -> Result<HybridOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action.is_nan() {
            return Err(Error::NonFinite("action".into()));
        }
        let a = action.clamp(-1.0, 1.0);
        self.actions.push(a);
        self.step += 1;
        self.bias += a * ctx.lambda * ctx.trajectory.delta_p();
        let hit = self.accumulator(ctx) >= ctx.trajectory.boundary();
        let overrun = !hit && self.step >= ctx.max_steps;
        if !(hit || overrun) {
            return Ok(HybridOutcome {
                reward: 0.0,
                done: false,
                r_rl: None,
                penalty: false,
            });
        }
        self.done = true;
        let r_rl = if hit {
            self.step as f64 / ctx.frame_rate as f64
        } else {
            MAX_RT
        };
        Ok(HybridOutcome {
            reward: reward(r_rl, ctx.r_u(), ctx.baseline.r_t, overrun)?,
            done: true,
            r_rl: Some(r_rl),
            penalty: overrun,
        })
    }

    /// Summary of a finished episode.
    pub fn record(&self, ctx: &EpisodeContext, r_rl: f64, reward: f64) -> EpisodeRecord {
        EpisodeRecord {
            trial_id: ctx.trial_id(),
            actions: self.actions.clone(),
            steps: self.step,
            r_rl,
            reward,
            delta_p: ctx.trajectory.delta_p(),
            effect_trajectory: EpisodeRecord::effect(&self.actions, ctx.trajectory.delta_p()),
        }
    }
}

impl Default for HybridEpisode {
    fn default() -> Self {
        Self::new()
    }
}

/// Frame-level environment cycling through its contexts in a seeded
/// shuffled order, reshuffled each pass.
pub struct HybridEnv<T> {
    contexts: Vec<EpisodeContext>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    frames: Vec<Vec<T>>,
    current: Option<(usize, HybridEpisode, Vec<T>)>,
}

impl<T: Scalar> HybridEnv<T> {
    pub fn new(contexts: Vec<EpisodeContext>, seed: u64) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::invalid("hybrid env needs at least one context"));
        }
        let order = (0..contexts.len()).collect();
        Ok(Self {
            contexts,
            order,
            cursor: usize::MAX,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frames: frame_table(),
            current: None,
        })
    }

    pub fn contexts(&self) -> &[EpisodeContext] {
        &self.contexts
    }

    /// Starts an episode on context `idx`.
    pub fn reset_to(&mut self, idx: usize) -> Result<Vec<T>> {
        let ctx = self
            .contexts
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("no context {idx}")))?;
        let question = ctx.trial.question.encode().flat::<T>();
        let ep = HybridEpisode::new();
        let obs = self.observe(idx, &ep, &question);
        self.current = Some((idx, ep, question));
        Ok(obs)
    }

    fn observe(&self, idx: usize, ep: &HybridEpisode, question: &[T]) -> Vec<T> {
        let ctx = &self.contexts[idx];
        let frame = if ctx.trial.pressure_shown {
            let units = crate::stimuli::units_at(ep.frame_time(ctx), Default::default());
            &self.frames[1 + units as usize]
        } else {
            &self.frames[0]
        };
        let mut obs = Vec::with_capacity(HYBRID_OBS_DIM);
        obs.extend_from_slice(question);
        obs.extend_from_slice(frame);
        obs
    }

    /// Runs one episode on context `idx` with `policy` choosing each action.
    pub fn run_episode<F>(&mut self, idx: usize, mut policy: F) -> Result<EpisodeRecord>
    where
        F: FnMut(&[T]) -> f64,
    {
        let mut obs = self.reset_to(idx)?;
        loop {
            let t = self.step(policy(&obs))?;
            if t.done {
                let (i, ep, _) = self.current.as_ref().expect("episode active");
                let r_rl = t.info.r_rl.expect("terminal step sets r_rl");
                return Ok(ep.record(&self.contexts[*i], r_rl, t.reward));
            }
            obs = t.obs;
        }
    }
}

impl<T: Scalar> Environment<T> for HybridEnv<T> {
    fn obs_dim(&self) -> usize {
        HYBRID_OBS_DIM
    }

    fn reset(&mut self) -> Result<Vec<T>> {
        self.cursor = self.cursor.wrapping_add(1);
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.reset_to(self.order[self.cursor])
    }

    fn step(&mut self, action: f64) -> Result<Transition<T>> {
        let (idx, mut ep, question) = self.current.take().ok_or(Error::EpisodeDone)?;
        let out = ep.advance(&self.contexts[idx], action);
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                self.current = Some((idx, ep, question));
                return Err(e);
            }
        };
        let obs = self.observe(idx, &ep, &question);
        self.current = Some((idx, ep, question));
        Ok(Transition {
            obs,
            reward: out.reward,
            done: out.done,
            info: StepInfo {
                r_rl: out.r_rl,
                penalty: out.penalty,
            },
        })
    }
}
