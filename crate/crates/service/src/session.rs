//! Session state machine, independent of HTTP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pressuresim::controller::{ControllerState, Thresholds};
use pressuresim::data::{Group, TrialRecord, MAX_RT_SECONDS};
use pressuresim::taskgen::MathQuestion;

pub const MAX_TRIALS: u32 = 300;
pub const LIKERT_EVERY: u32 = 30;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SessionError {
    #[error("previous trial {0} has not been answered")]
    Unanswered(u32),
    #[error("session finished after {0} trials")]
    Finished(u32),
    #[error("no trial is pending")]
    NothingPending,
    #[error("trial_index {got} does not match pending trial {expected}")]
    Stale { got: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialView {
    pub trial_index: u32,
    pub question: String,
    pub pressure: bool,
    pub likert_due: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Response {
    pub trial_index: u32,
    /// `true` means the participant judged the congruence to hold.
    pub choice: bool,
    pub rt_ms: f64,
    #[serde(default)]
    pub attention: Option<u8>,
    #[serde(default)]
    pub anxiety: Option<u8>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Graded {
    pub accepted: bool,
    pub correct: bool,
}

#[derive(Debug, Clone)]
struct Pending {
    trial_index: u32,
    question: MathQuestion,
    pressure: bool,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub participant_id: String,
    pub group: Group,
    pub n_trials: u32,
    pub seed: u64,
    pub created_at: u64,
    controller: ControllerState,
    questions: ChaCha8Rng,
    coins: ChaCha8Rng,
    pending: Option<Pending>,
    log: Vec<TrialRecord>,
}

impl Session {
    pub fn new(
        id: String,
        participant_id: String,
        group: Group,
        n_trials: u32,
        seed: u64,
        thresholds: Thresholds,
        created_at: u64,
    ) -> Result<Self, SessionError> {
        if n_trials == 0 || n_trials > MAX_TRIALS {
            return Err(SessionError::Invalid(format!("n_trials must be in 1..={MAX_TRIALS}")));
        }
        if participant_id.trim().is_empty() || participant_id.chars().any(char::is_control) {
            return Err(SessionError::Invalid("participant_id must be non-empty plain text".into()));
        }
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Ok(Self {
            id,
            participant_id,
            group,
            n_trials,
            seed,
            created_at,
            controller: ControllerState::new(thresholds),
            questions: stream(1),
            coins: stream(2),
            pending: None,
            log: Vec::new(),
        })
    }

    /// Completed trials.
    pub fn cursor(&self) -> u32 {
        self.log.len() as u32
    }

    pub fn is_finished(&self) -> bool {
        self.cursor() >= self.n_trials
    }

    pub fn log(&self) -> &[TrialRecord] {
        &self.log
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn next_trial(&mut self) -> Result<TrialView, SessionError> {
        if let Some(p) = &self.pending {
            return Err(SessionError::Unanswered(p.trial_index));
        }
        if self.is_finished() {
            return Err(SessionError::Finished(self.cursor()));
        }
        let trial_index = self.cursor() + 1;
        let question = MathQuestion::random(&mut self.questions);
        // drawn every trial so the random stream stays aligned across groups
        let coin = self.coins.gen_bool(0.5);
        let pressure = match self.group {
            Group::None => false,
            Group::Static => true,
            Group::Random => coin,
            Group::Rule => self.controller.decide(),
        };
        self.pending = Some(Pending {
            trial_index,
            question,
            pressure,
        });
        Ok(TrialView {
            trial_index,
            question: question.render(),
            pressure,
            likert_due: trial_index % LIKERT_EVERY == 0,
        })
    }

    /// Validates and grades a response. Stale or unexpected responses are
    /// reported before range errors.
    pub fn respond(&mut self, r: &Response) -> Result<(Graded, TrialRecord), SessionError> {
        let p = self.pending.as_ref().ok_or(SessionError::NothingPending)?;
        if r.trial_index != p.trial_index {
            return Err(SessionError::Stale {
                got: r.trial_index,
                expected: p.trial_index,
            });
        }
        if !(r.rt_ms > 0.0 && r.rt_ms <= MAX_RT_SECONDS * 1000.0) {
            return Err(SessionError::Invalid(format!("rt_ms {} outside (0, 10000]", r.rt_ms)));
        }
        for (name, v) in [("attention", r.attention), ("anxiety", r.anxiety)] {
            if v.is_some_and(|v| !(1..=7).contains(&v)) {
                return Err(SessionError::Invalid(format!("{name} must be a 1-7 rating")));
            }
        }
        let rt = r.rt_ms / 1000.0;
        let correct = r.choice == p.question.is_divisible();
        if self.group == Group::Rule {
            self.controller
                .observe(rt, correct)
                .map_err(|e| SessionError::Invalid(e.to_string()))?;
        }
        let rec = TrialRecord {
            participant_id: self.participant_id.clone(),
            group: self.group,
            day: 1,
            trial_index: p.trial_index,
            question: p.question,
            pressure_shown: p.pressure,
            human_choice: r.choice,
            correct,
            rt_seconds: rt,
            attention: r.attention,
            anxiety: r.anxiety,
        };
        self.log.push(rec.clone());
        self.pending = None;
        Ok((
            Graded {
                accepted: true,
                correct,
            },
            rec,
        ))
    }
}

/// Stable 64-bit FNV-1a hash, used to derive per-participant seeds.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}
