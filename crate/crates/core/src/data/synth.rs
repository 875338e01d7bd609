//! Synthetic participants with a known generative model.
//!
//! Response time is `base_rt + w1 * hardness(q) + w2 * pressure + noise`,
//! clipped to `[0.2, 10]`. Questions, noise, choices, pressure draws and
//! ratings each use their own seeded stream, so two groups generated from
//! the same seed see the same questions and the same noise and differ only
//! through the pressure term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Group, TrialRecord};
use crate::controller::{ControllerState, Thresholds};
use crate::error::{Error, Result};
use crate::taskgen::MathQuestion;

pub const MIN_SYNTH_RT: f64 = 0.2;
pub const LIKERT_EVERY: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProfile {
    pub participant_id: String,
    pub base_rt: f64,
    pub hardness_weight: f64,
    pub pressure_weight: f64,
    pub noise_sd: f64,
    pub accuracy_floor: f64,
}

impl SynthProfile {
    /// Noise-free response time before clipping.
    pub fn expected_rt(&self, q: &MathQuestion, pressure_shown: bool) -> f64 {
        let pressure = if pressure_shown { 1.0 } else { 0.0 };
        self.base_rt + self.hardness_weight * hardness(q) + self.pressure_weight * pressure
    }

    pub fn p_correct(&self, q: &MathQuestion) -> f64 {
        self.accuracy_floor.max(1.0 - hardness(q) / 4.0)
    }
}

/// Difficulty proxy in `[0, 1.4]`.
pub fn hardness(q: &MathQuestion) -> f64 {
    let spread = ((q.num1() - q.num2()).abs() % 10) as f64 / 10.0;
    let remainder = if q.answer() != 0 { 0.5 } else { 0.0 };
    spread + remainder
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub profiles: Vec<SynthProfile>,
    pub group: Group,
    pub n_trials: u32,
    pub seed: u64,
    /// Controller thresholds for the rule group.
    #[serde(default)]
    pub thresholds: Thresholds,
}

/// Generative parameters stored next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub configs: Vec<SynthConfig>,
    pub n_records: usize,
}

struct Streams {
    questions: ChaCha8Rng,
    noise: ChaCha8Rng,
    choices: ChaCha8Rng,
    pressure: ChaCha8Rng,
    ratings: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64, participant: usize) -> Self {
        let base = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(participant as u64);
        let mk = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(stream);
            rng
        };
        Self {
            questions: mk(1),
            noise: mk(2),
            choices: mk(3),
            pressure: mk(4),
            ratings: mk(5),
        }
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<TrialRecord>> {
    if cfg.n_trials < 1 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let mut out = Vec::with_capacity(cfg.profiles.len() * cfg.n_trials as usize);
    for (pi, profile) in cfg.profiles.iter().enumerate() {
        if !(profile.noise_sd >= 0.0) || !(0.0..=1.0).contains(&profile.accuracy_floor) {
            return Err(Error::invalid(format!("bad profile {}", profile.participant_id)));
        }
        let noise = Normal::new(0.0, profile.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
        let rating = Normal::new(0.0, 1.0).expect("unit normal");
        let mut s = Streams::new(cfg.seed, pi);
        let mut controller = ControllerState::new(cfg.thresholds);
        let mut recent_pressure = 0u32;

        for trial_index in 1..=cfg.n_trials {
            let question = MathQuestion::random(&mut s.questions);
            let eps = noise.sample(&mut s.noise);
            let u: f64 = s.choices.gen();
            let coin: bool = s.pressure.gen_bool(0.5);
            let pressure_shown = match cfg.group {
                Group::None => false,
                Group::Static => true,
                Group::Random => coin,
                Group::Rule => controller.decide(),
            };
            let rt = (profile.expected_rt(&question, pressure_shown) + eps)
                .clamp(MIN_SYNTH_RT, super::MAX_RT_SECONDS);
            let correct = u < profile.p_correct(&question);
            let human_choice = if correct {
                question.is_divisible()
            } else {
                !question.is_divisible()
            };
            if cfg.group == Group::Rule {
                controller.observe(rt, correct)?;
            }

            recent_pressure += pressure_shown as u32;
            let (attention, anxiety) = if trial_index % LIKERT_EVERY == 0 {
                let frac = recent_pressure as f64 / LIKERT_EVERY as f64;
                recent_pressure = 0;
                let a = 5.0 - frac + rating.sample(&mut s.ratings);
                let x = 3.0 + 2.0 * frac + rating.sample(&mut s.ratings);
                (Some(likert(a)), Some(likert(x)))
            } else {
                (None, None)
            };

            out.push(TrialRecord {
                participant_id: profile.participant_id.clone(),
                group: cfg.group,
                day: 1,
                trial_index,
                question,
                pressure_shown,
                human_choice,
                correct,
                rt_seconds: rt,
                attention,
                anxiety,
            });
        }
    }
    Ok(out)
}

fn likert(x: f64) -> u8 {
    x.round().clamp(1.0, 7.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(w1: f64, w2: f64, sd: f64) -> SynthProfile {
        SynthProfile {
            participant_id: "s1".into(),
            base_rt: 2.5,
            hardness_weight: w1,
            pressure_weight: w2,
            noise_sd: sd,
            accuracy_floor: 0.7,
        }
    }

    fn cfg(group: Group, p: SynthProfile, n: u32) -> SynthConfig {
        SynthConfig {
            profiles: vec![p],
            group,
            n_trials: n,
            seed: 11,
            thresholds: Thresholds::default(),
        }
    }

    fn mean_rt(r: &[TrialRecord]) -> f64 {
        r.iter().map(|t| t.rt_seconds).sum::<f64>() / r.len() as f64
    }

    #[test]
    fn static_pressure_speeds_up() {
        let p = profile(1.0, -0.5, 0.3);
        let stat = synth_generate(&cfg(Group::Static, p.clone(), 1000)).unwrap();
        let none = synth_generate(&cfg(Group::None, p, 1000)).unwrap();
        assert!(mean_rt(&stat) < mean_rt(&none));
    }

    #[test]
    fn matched_trials_differ_by_pressure_term() {
        let p = profile(1.0, -0.5, 0.3);
        let stat = synth_generate(&cfg(Group::Static, p.clone(), 500)).unwrap();
        let none = synth_generate(&cfg(Group::None, p.clone(), 500)).unwrap();
        for (s, n) in stat.iter().zip(&none) {
            assert_eq!(s.question, n.question);
            let gap = p.expected_rt(&n.question, false) - p.expected_rt(&s.question, true);
            assert!((gap - 0.5).abs() < 1e-12);
            // unclipped rows carry the same noise
            if s.rt_seconds > MIN_SYNTH_RT && n.rt_seconds > MIN_SYNTH_RT {
                assert!((n.rt_seconds - s.rt_seconds - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_generator() {
        let recs = synth_generate(&cfg(Group::Static, profile(0.0, 0.0, 0.0), 50)).unwrap();
        assert!(recs.iter().all(|r| r.rt_seconds == 2.5));
    }

    #[test]
    fn random_group_pressure_rate() {
        let recs = synth_generate(&cfg(Group::Random, profile(1.0, -0.5, 0.3), 1000)).unwrap();
        let rate = recs.iter().filter(|r| r.pressure_shown).count() as f64 / 1000.0;
        assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn records_are_valid_and_deterministic() {
        for g in Group::ALL {
            let c = cfg(g, profile(1.5, -0.5, 0.5), 300);
            let a = synth_generate(&c).unwrap();
            assert_eq!(a, synth_generate(&c).unwrap());
            assert!(a.iter().all(|r| r.violations().is_empty()));
            let rated = a.iter().filter(|r| r.attention.is_some()).count();
            assert_eq!(rated, 10);
        }
    }

    #[test]
    fn rule_group_uses_controller() {
        let mut c = cfg(Group::Rule, profile(1.5, -0.5, 0.5), 300);
        c.thresholds = Thresholds {
            rt: 2.0,
            delta_rt: -10.0,
            accu: 1.01,
            pc: 7,
            tc: 1,
        };
        let recs = synth_generate(&c).unwrap();
        assert!(!recs[0].pressure_shown);
        assert_eq!(recs.iter().filter(|r| r.pressure_shown).count(), 7);
    }
}
