use pressuresim::data::{Group, TrialRecord};
use pressuresim::envs::{
    EnvConfig, Environment, EpisodeContext, HybridEnv, PureEnv, HYBRID_OBS_DIM,
};
use pressuresim::stimuli::render_frame;
use pressuresim::taskgen::{MathQuestion, ENCODED_LEN};
use pressuresim::transfer::BaselinePrediction;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trial(pressure: bool, rt: f64, idx: u32) -> TrialRecord {
    TrialRecord {
        participant_id: "p1".into(),
        group: if pressure { Group::Static } else { Group::None },
        day: 1,
        trial_index: idx,
        question: MathQuestion::new(3, 4, 1, 2, 5).unwrap(),
        pressure_shown: pressure,
        human_choice: false,
        correct: true,
        rt_seconds: rt,
        attention: None,
        anxiety: None,
    }
}

fn ctx(pressure: bool, r_p: f64, r_t: f64, r_u: f64) -> EpisodeContext {
    let base = BaselinePrediction {
        choice: true,
        r_p,
        r_t,
    };
    EpisodeContext::new(trial(pressure, r_u, 1), base, &EnvConfig::default()).unwrap()
}

fn run(env: &mut HybridEnv<f64>, idx: usize, a: f64) -> pressuresim::envs::EpisodeRecord {
    env.run_episode(idx, |_| a).unwrap()
}

#[test]
fn zero_action_recovers_quantized_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let contexts: Vec<_> = (0..1000)
        .map(|_| {
            let r_p = rng.gen_range(0.51..=1.0);
            let r_t = rng.gen_range(0.2..=10.0);
            ctx(rng.gen_bool(0.5), r_p, r_t, 3.0)
        })
        .collect();
    let mut env = HybridEnv::<f64>::new(contexts.clone(), 0).unwrap();
    for (i, c) in contexts.iter().enumerate() {
        let rec = run(&mut env, i, 0.0);
        let expected = (5.0 * c.baseline.r_t + 0.5).floor().max(1.0) / 5.0;
        assert_eq!(rec.r_rl, expected, "r_t {}", c.baseline.r_t);
        assert_eq!(rec.steps, c.trajectory.steps());
    }
}

#[test]
fn worked_examples() {
    let contexts = vec![ctx(true, 0.9, 2.0, 2.0), ctx(false, 0.9, 2.0, 2.0)];
    let mut env = HybridEnv::<f64>::new(contexts, 0).unwrap();
    let rec = run(&mut env, 0, 0.0);
    assert_eq!((rec.steps, rec.r_rl), (10, 2.0));

    let faster = run(&mut env, 0, 1.0);
    assert!(faster.steps <= 10);

    // delta_p = 0.4 / 10 = 0.04, so the bias is -0.02 per step
    let slow = run(&mut env, 0, -1.0);
    assert_eq!((slow.steps, slow.r_rl), (50, 10.0));
    // E_svm = 0 floors to 1e-6, E_rl = 4 >= it: no gain, only the penalty
    assert_eq!(slow.reward, -1.0);
    assert_eq!(slow.effect_trajectory.len(), 50);
    assert!((slow.effect_trajectory[49] + 50.0 * 0.04).abs() < 1e-12);
}

#[test]
fn reset_observations() {
    let contexts = vec![ctx(true, 0.8, 3.0, 3.0), ctx(false, 0.8, 3.0, 3.0)];
    let mut env = HybridEnv::<f64>::new(contexts, 0).unwrap();
    let on = env.reset_to(0).unwrap();
    assert_eq!(on.len(), HYBRID_OBS_DIM);
    let frame = render_frame(0.0, true).unwrap();
    let expect: Vec<f64> = frame.pixels().iter().map(|&v| f64::from(v)).collect();
    assert_eq!(&on[ENCODED_LEN..], &expect[..]);
    assert_eq!(env.reset_to(0).unwrap(), on);
    let off = env.reset_to(1).unwrap();
    assert!(off[ENCODED_LEN..].iter().all(|&v| v == 0.0));
    assert!(on.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn stepping_a_finished_episode_errors() {
    let mut env = HybridEnv::<f64>::new(vec![ctx(false, 0.9, 0.2, 1.0)], 0).unwrap();
    env.reset().unwrap();
    let t = env.step(0.0).unwrap();
    assert!(t.done);
    assert!(env.step(0.0).is_err());
}

proptest! {
    #[test]
    fn larger_actions_never_finish_later(
        r_p in 0.51f64..1.0,
        r_t in 0.2f64..10.0,
        lo in prop::collection::vec(-1.0f64..1.0, 50),
        bump in prop::collection::vec(0.0f64..1.0, 50),
    ) {
        let c = ctx(true, r_p, r_t, 2.0);
        let mut env = HybridEnv::<f64>::new(vec![c], 0).unwrap();
        let hi: Vec<f64> = lo.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
        let mut k = 0;
        let s_lo = env.run_episode(0, |_| { k += 1; lo[k - 1] }).unwrap().steps;
        let mut k = 0;
        let s_hi = env.run_episode(0, |_| { k += 1; hi[k - 1] }).unwrap().steps;
        prop_assert!(s_hi <= s_lo);
    }
}

#[test]
fn pure_env_offsets_and_penalties() {
    let cfg = EnvConfig {
        video_dim: 8,
        pure_max_trials: 3,
        ..EnvConfig::default()
    };
    let mk = |r_t: f64| {
        let base = BaselinePrediction {
            choice: true,
            r_p: 0.8,
            r_t,
        };
        EpisodeContext::new(trial(true, 4.0, 1), base, &cfg).unwrap()
    };
    let mut env = PureEnv::<f64>::new(vec![mk(3.0), mk(9.5), mk(2.0), mk(4.0)], &cfg).unwrap();
    assert_eq!(env.obs_dim(), cfg.pure_obs_dim());
    env.reset().unwrap();
    let t = env.step(0.2).unwrap();
    assert_eq!(t.info.r_rl, Some(5.0));
    assert!(!t.done);
    let t = env.step(0.2).unwrap();
    assert_eq!(t.info.r_rl, Some(11.5));
    assert!(t.done && t.info.penalty);
    env.reset().unwrap();
    for expect in [2.0, 4.0, 3.0] {
        let t = env.step(0.0).unwrap();
        assert_eq!(t.info.r_rl, Some(expect));
        assert!(!t.info.penalty);
    }
    assert!(env.step(0.0).is_err());
}
