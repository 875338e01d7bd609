use std::ops::ControlFlow;

use ndarray::Array2;
use pressuresim::envs::{Environment, StepInfo, Transition};
use pressuresim::ppo::{train, Collector, LossInputs, PolicyNetwork, PpoConfig, Trainer};
use pressuresim::Result;

/// One-step episodes; reward is the clamped action itself.
struct Bandit;

impl Environment<f64> for Bandit {
    fn obs_dim(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0])
    }

    fn step(&mut self, action: f64) -> Result<Transition<f64>> {
        Ok(Transition {
            obs: vec![1.0, 0.0],
            reward: action.clamp(-1.0, 1.0),
            done: true,
            info: StepInfo {
                r_rl: None,
                penalty: false,
            },
        })
    }
}

/// Zero reward, three-step episodes.
struct Silent(usize);

impl Environment<f64> for Silent {
    fn obs_dim(&self) -> usize {
        1
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.0 = 0;
        Ok(vec![0.5])
    }

    fn step(&mut self, _: f64) -> Result<Transition<f64>> {
        self.0 += 1;
        Ok(Transition {
            obs: vec![0.5],
            reward: 0.0,
            done: self.0 == 3,
            info: StepInfo {
                r_rl: None,
                penalty: false,
            },
        })
    }
}

#[test]
fn rollout_size_and_zero_signal() {
    let policy = PolicyNetwork::<f64>::new(1, 0).unwrap();
    let cfg = PpoConfig::default();
    let mut c = Collector::new(3);
    let b = c.collect(&mut Silent(0), &policy, 64, &cfg).unwrap();
    assert_eq!(b.len(), 64);
    assert_eq!(b.observations.nrows(), 64);
    assert_eq!(b.dones.iter().filter(|&&d| d).count(), 21);
    // advantage = return - value, and returns are the bootstrapped values
    for k in 0..64 {
        assert!((b.returns[k] - b.values[k] - b.advantages[k]).abs() < 1e-12);
    }
}

#[test]
fn zero_reward_gae_is_zero_when_values_are_zero() {
    let mut policy = PolicyNetwork::<f64>::new(1, 0).unwrap();
    policy.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let mut c = Collector::new(3);
    let b = c.collect(&mut Silent(0), &policy, 10, &PpoConfig::default()).unwrap();
    assert!(b.advantages.iter().all(|&a| a == 0.0));
}

#[test]
fn collection_is_deterministic() {
    let policy = PolicyNetwork::<f64>::new(2, 5).unwrap();
    let cfg = PpoConfig::default();
    let a = Collector::new(9).collect(&mut Bandit, &policy, 32, &cfg).unwrap();
    let b = Collector::new(9).collect(&mut Bandit, &policy, 32, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_policy_ratio_is_one() {
    let policy = PolicyNetwork::<f64>::new(2, 5).unwrap();
    let cfg = PpoConfig::default();
    let b = Collector::new(1).collect(&mut Bandit, &policy, 16, &cfg).unwrap();
    let inputs = LossInputs {
        obs: b.observations.view(),
        actions: &b.actions,
        old_log_probs: &b.log_probs,
        advantages: &b.advantages,
        returns: &b.returns,
    };
    let (_, _, stats) = policy.loss_and_grad(&inputs, &cfg);
    assert_eq!(stats.clip_fraction, 0.0);
    assert!(stats.approx_kl.abs() < 1e-15);
}

#[test]
fn positive_advantages_raise_log_probs() {
    let mut policy = PolicyNetwork::<f64>::new(2, 7).unwrap();
    let obs = Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, -1.0, 0.2]).unwrap();
    let actions = vec![0.3, -0.2, 0.5, 0.1];
    let (mu, _) = policy.evaluate(obs.view());
    let old: Vec<f64> = mu.iter().zip(&actions).map(|(&m, &a)| policy.log_prob(m, a)).collect();
    let batch = pressuresim::ppo::RolloutBatch {
        observations: obs.clone(),
        actions: actions.clone(),
        log_probs: old.clone(),
        rewards: vec![1.0; 4],
        values: vec![0.0; 4],
        dones: vec![true; 4],
        advantages: vec![1.0, 2.0, 3.0, 4.0],
        returns: vec![1.0; 4],
        episode_returns: vec![],
    };
    let cfg = PpoConfig {
        epochs: 1,
        minibatch: 4,
        vf_coef: 0.0,
        ..PpoConfig::default()
    };
    Trainer::new(&policy, cfg).update(&mut policy, &batch).unwrap();
    let (mu, _) = policy.evaluate(obs.view());
    let new: Vec<f64> = mu.iter().zip(&actions).map(|(&m, &a)| policy.log_prob(m, a)).collect();
    // normalized advantages: the two largest are positive
    let before = old[2] + old[3];
    let after = new[2] + new[3];
    assert!(after >= before, "{before} -> {after}");
}

#[test]
fn bandit_mean_converges_toward_upper_bound() {
    let cfg = PpoConfig {
        n_steps: 256,
        ..PpoConfig::default()
    };
    let policy = PolicyNetwork::<f64>::new(2, 0).unwrap();
    let (policy, curve) = train(&mut Bandit, policy, &cfg, 20_000, |_, _| ControlFlow::Continue(None)).unwrap();
    let (mu, _) = policy.evaluate(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap().view());
    assert!(mu[0] > 0.9, "mean {}", mu[0]);
    assert!(curve.last().unwrap().mean_reward > curve[0].mean_reward);
}

#[test]
fn zero_budget_and_repeatability() {
    let cfg = PpoConfig {
        n_steps: 64,
        ..PpoConfig::default()
    };
    let p0 = PolicyNetwork::<f64>::new(2, 3).unwrap();
    let (same, curve) = train(&mut Bandit, p0.clone(), &cfg, 0, |_, _| ControlFlow::Continue(None)).unwrap();
    assert_eq!(same, p0);
    assert!(curve.is_empty());

    let run = || {
        train(&mut Bandit, p0.clone(), &cfg, 256, |_, _| ControlFlow::Continue(None))
            .unwrap()
            .1
            .iter()
            .map(|p| (p.step, p.mean_reward, p.policy_loss, p.value_loss))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
