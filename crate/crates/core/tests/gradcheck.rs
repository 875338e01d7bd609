use ndarray::Array2;
use pressuresim::nn::gradient_check;
use pressuresim::ppo::{LossInputs, PolicyNetwork, PpoConfig};
use pressuresim::reasoner::{ReasonerModel, Sample};
use pressuresim::taskgen::MathQuestion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn recurrent_gradients_match_central_differences() {
    let samples: Vec<Sample> = [(3, 4, 1, 2, 5), (9, 9, 1, 8, 7), (1, 2, 1, 1, 3)]
        .iter()
        .map(|&(a, b, c, d, e)| Sample::from_question(&MathQuestion::new(a, b, c, d, e).unwrap()))
        .collect();
    let model = ReasonerModel::<f64>::new(4, 9).unwrap();
    let (_, _, grad) = model.loss_and_grad(&samples);
    let mut probe = model.clone();
    let mut params = model.params().to_vec();
    let err = gradient_check(&mut params, &grad, 1e-5, |p| {
        probe.params_mut().copy_from_slice(p);
        probe.loss(&samples)
    });
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn actor_critic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 6;
    let policy = PolicyNetwork::<f64>::new(3, 1).unwrap();
    let obs = Array2::from_shape_simple_fn((n, 3), || rng.gen_range(-1.0..1.0));
    let (mu, _) = policy.evaluate(obs.view());
    let actions: Vec<f64> = mu.iter().map(|m| m + rng.gen_range(-0.8..0.8)).collect();
    // old log-probs perturbed so some ratios fall outside the clip range
    let old: Vec<f64> = mu
        .iter()
        .zip(&actions)
        .enumerate()
        .map(|(i, (&m, &a))| policy.log_prob(m, a) + [0.05, -0.4, 0.1, 0.5, -0.05, 0.0][i])
        .collect();
    let adv: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.3 } else { -0.7 }).collect();
    let ret: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cfg = PpoConfig {
        ent_coef: 0.01,
        ..PpoConfig::default()
    };
    let inputs = LossInputs {
        obs: obs.view(),
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };
    let (_, grad, _) = policy.loss_and_grad(&inputs, &cfg);
    let mut probe = policy.clone();
    let mut params = policy.params().to_vec();
    let err = gradient_check(&mut params, &grad, 1e-6, |p| {
        probe.params_mut().copy_from_slice(p);
        probe.loss_and_grad(&inputs, &cfg).0
    });
    assert!(err < TOL, "max relative error {err}");
}
