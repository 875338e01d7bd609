use super::video::{extract_video_features, FrameExtractor, RandomConvExtractor, VIDEO_FRAMES};
use super::{reward, EnvConfig, EpisodeContext, Environment, StepInfo, Transition};
use crate::ddm::MAX_RT;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stimuli::frame_sequence;

/// Trial-level environment. Episodes walk the contexts in order, one trial
/// per step, and resume where the previous episode stopped.
pub struct PureEnv<T> {
    contexts: Vec<EpisodeContext>,
    max_trials: usize,
    /// Flattened video features: `[blank, pressure]`.
    videos: [Vec<T>; 2],
    cursor: usize,
    consumed: usize,
    active: bool,
}

impl<T: Scalar> PureEnv<T> {
    pub fn new(contexts: Vec<EpisodeContext>, cfg: &EnvConfig) -> Result<Self> {
        let ex = RandomConvExtractor::new(cfg.video_dim, cfg.extractor_seed);
        Self::with_extractor(contexts, cfg, &ex)
    }

    pub fn with_extractor<E: FrameExtractor + ?Sized>(
        contexts: Vec<EpisodeContext>,
        cfg: &EnvConfig,
        extractor: &E,
    ) -> Result<Self> {
        cfg.validate()?;
        if contexts.is_empty() {
            return Err(Error::invalid("pure env needs at least one context"));
        }
        let duration = VIDEO_FRAMES as f64 / cfg.frame_rate as f64;
        let video = |on: bool| -> Result<Vec<T>> {
            let frames = frame_sequence(duration, cfg.frame_rate, on)?;
            let feats = extract_video_features(&frames, extractor)?;
            Ok(feats.iter().map(|&v| T::lit(v)).collect())
        };
        Ok(Self {
            contexts,
            max_trials: cfg.pure_max_trials,
            videos: [video(false)?, video(true)?],
            cursor: 0,
            consumed: 0,
            active: false,
        })
    }

    pub fn obs_len(&self) -> usize {
        crate::taskgen::ENCODED_LEN + self.videos[0].len()
    }

    pub fn contexts(&self) -> &[EpisodeContext] {
        &self.contexts
    }

    pub fn observation(&self, idx: usize) -> Vec<T> {
        let ctx = &self.contexts[idx];
        let mut obs = ctx.trial.question.encode().flat::<T>();
        obs.extend_from_slice(&self.videos[ctx.trial.pressure_shown as usize]);
        obs
    }

    /// `R_rl = R_t + R_delta * RT_max` for a clamped action.
    pub fn response_time(ctx: &EpisodeContext, r_delta: f64) -> f64 {
        ctx.baseline.r_t + r_delta.clamp(-1.0, 1.0) * MAX_RT
    }
}

impl<T: Scalar> Environment<T> for PureEnv<T> {
    fn obs_dim(&self) -> usize {
        self.obs_len()
    }

    fn reset(&mut self) -> Result<Vec<T>> {
        if self.active {
            // abandoning an episode mid-way still moves past the current trial
            self.cursor = (self.cursor + 1) % self.contexts.len();
        }
        self.active = true;
        self.consumed = 0;
        Ok(self.observation(self.cursor))
    }

    fn step(&mut self, action: f64) -> Result<Transition<T>> {
        if !self.active {
            return Err(Error::EpisodeDone);
        }
        if action.is_nan() {
            return Err(Error::NonFinite("action".into()));
        }
        let ctx = &self.contexts[self.cursor];
        let r_rl = Self::response_time(ctx, action);
        let overrun = !(0.0..=MAX_RT).contains(&r_rl);
        let reward = reward(r_rl, ctx.r_u(), ctx.baseline.r_t, overrun)?;
        self.consumed += 1;
        self.cursor = (self.cursor + 1) % self.contexts.len();
        let done = overrun || self.consumed >= self.max_trials;
        if done {
            self.active = false;
        }
        Ok(Transition {
            obs: self.observation(self.cursor),
            reward,
            done,
            info: StepInfo {
                r_rl: Some(r_rl),
                penalty: overrun,
            },
        })
    }
}
