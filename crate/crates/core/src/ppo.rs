//! Clipped-surrogate policy optimization with a shared-trunk Gaussian
//! actor-critic.
//!
//! The network is `obs -> tanh(64) -> tanh(64)`, followed by a linear action
//! mean, a linear value head, and a state-independent learnable `log_std`.
//! Actions are sampled unclamped (log-probs refer to the raw sample) and
//! clamped to `[-1, 1]` by the environment.

use std::io::Write;
use std::ops::ControlFlow;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, uniform_init, Adam, AdamConfig, ParamLayout};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &[u8; 4] = b"PPO_";
pub const HIDDEN: usize = 64;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub n_steps: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 10,
            minibatch: 64,
            n_steps: 2048,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork<T> {
    obs_dim: usize,
    seed: u64,
    layout: ParamLayout,
    params: Vec<T>,
}

#[derive(Clone, Copy)]
enum P {
    W1 = 0,
    B1,
    W2,
    B2,
    WMu,
    BMu,
    WV,
    BV,
    LogStd,
}

fn layout_for(obs_dim: usize) -> ParamLayout {
    let mut l = ParamLayout::new();
    l.push("w1", HIDDEN, obs_dim);
    l.push("b1", HIDDEN, 1);
    l.push("w2", HIDDEN, HIDDEN);
    l.push("b2", HIDDEN, 1);
    l.push("w_mu", 1, HIDDEN);
    l.push("b_mu", 1, 1);
    l.push("w_v", 1, HIDDEN);
    l.push("b_v", 1, 1);
    l.push("log_std", 1, 1);
    l
}

/// Activations kept for the backward pass.
struct Forward<T> {
    h1: Array2<T>,
    h2: Array2<T>,
    mu: Array1<T>,
    value: Array1<T>,
}

/// Per-sample quantities the loss needs.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    pub obs: ArrayView2<'a, T>,
    pub actions: &'a [T],
    pub old_log_probs: &'a [T],
    pub advantages: &'a [T],
    pub returns: &'a [T],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl<T: Scalar> PolicyNetwork<T> {
    /// Uniform `±1/sqrt(fan_in)` init; the action head is scaled by 0.01 so
    /// the initial mean action is close to zero.
    pub fn new(obs_dim: usize, seed: u64) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::invalid("obs_dim must be >= 1"));
        }
        let layout = layout_for(obs_dim);
        let mut params = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = [
            (P::W1, obs_dim),
            (P::B1, obs_dim),
            (P::W2, HIDDEN),
            (P::B2, HIDDEN),
            (P::WV, HIDDEN),
            (P::BV, HIDDEN),
        ];
        for (p, fan_in) in fan {
            let r = layout.block(p as usize).range();
            uniform_init(&mut params[r], 1.0 / (fan_in as f64).sqrt(), &mut rng);
        }
        let r = layout.block(P::WMu as usize).range();
        uniform_init(&mut params[r], 0.01 / (HIDDEN as f64).sqrt(), &mut rng);
        Ok(Self {
            obs_dim,
            seed,
            layout,
            params,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn log_std(&self) -> T {
        self.layout.vec(P::LogStd as usize, &self.params)[0]
    }

    fn forward(&self, obs: ArrayView2<'_, T>) -> Forward<T> {
        let l = &self.layout;
        let p = &self.params;
        let mut h1 = obs.dot(&l.mat(P::W1 as usize, p).t());
        h1 += &l.vec(P::B1 as usize, p);
        h1.mapv_inplace(T::tanh);
        let mut h2 = h1.dot(&l.mat(P::W2 as usize, p).t());
        h2 += &l.vec(P::B2 as usize, p);
        h2.mapv_inplace(T::tanh);
        let mu = h2.dot(&l.mat(P::WMu as usize, p).row(0)) + l.vec(P::BMu as usize, p)[0];
        let value = h2.dot(&l.mat(P::WV as usize, p).row(0)) + l.vec(P::BV as usize, p)[0];
        Forward { h1, h2, mu, value }
    }

    /// `(action mean, value)` per row.
    pub fn evaluate(&self, obs: ArrayView2<'_, T>) -> (Array1<T>, Array1<T>) {
        let f = self.forward(obs);
        (f.mu, f.value)
    }

    /// Deterministic action for one observation, clamped to `[-1, 1]`.
    pub fn act_deterministic(&self, obs: &[T]) -> f64 {
        let view = ArrayView2::from_shape((1, obs.len()), obs).expect("row");
        let (mu, _) = self.evaluate(view);
        mu[0].to_f64_lossy().clamp(-1.0, 1.0)
    }

    pub fn log_prob(&self, mu: T, action: T) -> T {
        let ls = self.log_std();
        let z = (action - mu) / ls.exp();
        -T::lit(0.5) * z * z - ls - T::lit(0.5 * LN_2PI)
    }

    pub fn entropy(&self) -> T {
        T::lit(0.5 + 0.5 * LN_2PI) + self.log_std()
    }

    /// Clipped-surrogate loss and its gradient with respect to every
    /// parameter. Advantages are used as given.
    pub fn loss_and_grad(&self, b: &LossInputs<'_, T>, cfg: &PpoConfig) -> (T, Vec<T>, LossStats) {
        let n = b.actions.len();
        let nf = T::from_usize(n).expect("usize fits");
        let f = self.forward(b.obs);
        let ls = self.log_std();
        let var = (ls + ls).exp();
        let eps = T::lit(cfg.clip);
        let one = T::one();
        let vf = T::lit(cfg.vf_coef);
        let ent = T::lit(cfg.ent_coef);

        let mut pg = T::zero();
        let mut vl = T::zero();
        let mut kl = T::zero();
        let mut clipped = 0usize;
        let mut d_mu = Array1::zeros(n);
        let mut d_v = Array1::zeros(n);
        let mut d_ls = T::zero();
        for k in 0..n {
            let diff = b.actions[k] - f.mu[k];
            let lp = self.log_prob(f.mu[k], b.actions[k]);
            let log_ratio = lp - b.old_log_probs[k];
            let ratio = log_ratio.exp();
            let adv = b.advantages[k];
            let unclipped = ratio * adv;
            let clipped_ratio = ratio.max(one - eps).min(one + eps);
            let surrogate = clipped_ratio * adv;
            if (ratio - one).abs() > eps {
                clipped += 1;
            }
            kl += (ratio - one) - log_ratio;
            // gradient flows through the unclipped branch whenever it is the min
            let d_logp = if unclipped <= surrogate {
                pg -= unclipped;
                -adv * ratio / nf
            } else {
                pg -= surrogate;
                T::zero()
            };
            d_mu[k] = d_logp * diff / var;
            d_ls += d_logp * (diff * diff / var - one);
            let verr = f.value[k] - b.returns[k];
            vl += verr * verr;
            d_v[k] = T::lit(2.0) * vf * verr / nf;
        }
        pg /= nf;
        vl /= nf;
        let entropy = self.entropy();
        let loss = pg + vf * vl - ent * entropy;
        d_ls -= ent;

        let l = &self.layout;
        let p = &self.params;
        let mut g = vec![T::zero(); l.total()];
        let w_mu = l.mat(P::WMu as usize, p).row(0).to_owned();
        let w_v = l.mat(P::WV as usize, p).row(0).to_owned();
        l.mat_mut(P::WMu as usize, &mut g)
            .row_mut(0)
            .assign(&f.h2.t().dot(&d_mu));
        l.vec_mut(P::BMu as usize, &mut g)[0] = d_mu.sum();
        l.mat_mut(P::WV as usize, &mut g)
            .row_mut(0)
            .assign(&f.h2.t().dot(&d_v));
        l.vec_mut(P::BV as usize, &mut g)[0] = d_v.sum();
        l.vec_mut(P::LogStd as usize, &mut g)[0] = d_ls;

        let mut dz2 = d_mu.insert_axis(Axis(1)).dot(&w_mu.insert_axis(Axis(0)))
            + d_v.insert_axis(Axis(1)).dot(&w_v.insert_axis(Axis(0)));
        dz2.zip_mut_with(&f.h2, |d, &h| *d *= one - h * h);
        l.mat_mut(P::W2 as usize, &mut g).assign(&dz2.t().dot(&f.h1));
        l.vec_mut(P::B2 as usize, &mut g).assign(&dz2.sum_axis(Axis(0)));
        let mut dz1 = dz2.dot(&l.mat(P::W2 as usize, p));
        dz1.zip_mut_with(&f.h1, |d, &h| *d *= one - h * h);
        l.mat_mut(P::W1 as usize, &mut g).assign(&dz1.t().dot(&b.obs));
        l.vec_mut(P::B1 as usize, &mut g).assign(&dz1.sum_axis(Axis(0)));

        let stats = LossStats {
            policy_loss: pg.to_f64_lossy(),
            value_loss: vl.to_f64_lossy(),
            entropy: entropy.to_f64_lossy(),
            approx_kl: (kl / nf).to_f64_lossy(),
            clip_fraction: clipped as f64 / n as f64,
        };
        (loss, g, stats)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, self.seed)
            .with_meta(vec![self.obs_dim as u64, HIDDEN as u64]);
        ck.push_array("params", self.params.iter().map(|v| v.to_f64_lossy()).collect());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: "<policy>".into(),
            reason,
        };
        if &ck.kind != CHECKPOINT_KIND {
            return Err(bad("not a policy checkpoint".into()));
        }
        let [obs_dim, hidden] = ck.meta[..] else {
            return Err(bad("bad meta".into()));
        };
        if hidden as usize != HIDDEN {
            return Err(bad(format!("unsupported hidden width {hidden}")));
        }
        let layout = layout_for(obs_dim as usize);
        let values = ck.array("params").ok_or_else(|| bad("missing params".into()))?;
        if values.len() != layout.total() {
            return Err(bad(format!(
                "expected {} params, found {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self {
            obs_dim: obs_dim as usize,
            seed: ck.seed,
            layout,
            params: values.iter().map(|&v| T::lit(v)).collect(),
        })
    }
}

/// Transitions from one collection phase.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch<T> {
    pub observations: Array2<T>,
    pub actions: Vec<T>,
    pub log_probs: Vec<T>,
    pub rewards: Vec<f64>,
    pub values: Vec<T>,
    pub dones: Vec<bool>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
    /// Undiscounted returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
}

impl<T> RolloutBatch<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Rollout state carried between collection phases.
pub struct Collector<T> {
    obs: Option<Vec<T>>,
    episode_return: f64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Collector<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            obs: None,
            episode_return: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Steps `env` for `n_steps` with sampled actions and computes GAE.
    pub fn collect<E: Environment<T>>(
        &mut self,
        env: &mut E,
        policy: &PolicyNetwork<T>,
        n_steps: usize,
        cfg: &PpoConfig,
    ) -> Result<RolloutBatch<T>> {
        if n_steps < 1 {
            return Err(Error::invalid("n_steps must be >= 1"));
        }
        let dim = policy.obs_dim();
        if env.obs_dim() != dim {
            return Err(Error::invalid(format!(
                "env observations have {} values, policy expects {dim}",
                env.obs_dim()
            )));
        }
        let std = policy.log_std().exp();
        let mut observations = Array2::zeros((n_steps, dim));
        let mut batch = RolloutBatch {
            observations: Array2::zeros((0, 0)),
            actions: Vec::with_capacity(n_steps),
            log_probs: Vec::with_capacity(n_steps),
            rewards: Vec::with_capacity(n_steps),
            values: Vec::with_capacity(n_steps),
            dones: Vec::with_capacity(n_steps),
            advantages: Vec::new(),
            returns: Vec::new(),
            episode_returns: Vec::new(),
        };
        for k in 0..n_steps {
            let obs = match self.obs.take() {
                Some(o) => o,
                None => env.reset()?,
            };
            observations.row_mut(k).assign(&ndarray::ArrayView1::from(&obs[..]));
            let (mu, v) = policy.evaluate(observations.slice(ndarray::s![k..k + 1, ..]));
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let action = mu[0] + std * T::lit(z);
            let t = env.step(action.to_f64_lossy())?;
            if !t.reward.is_finite() {
                return Err(Error::NonFinite(format!("reward {}", t.reward)));
            }
            batch.actions.push(action);
            batch.log_probs.push(policy.log_prob(mu[0], action));
            batch.values.push(v[0]);
            batch.rewards.push(t.reward);
            batch.dones.push(t.done);
            self.episode_return += t.reward;
            if t.done {
                batch.episode_returns.push(self.episode_return);
                self.episode_return = 0.0;
            } else {
                self.obs = Some(t.obs);
            }
        }
        let last_value = match &self.obs {
            Some(o) => {
                let view = ArrayView2::from_shape((1, o.len()), &o[..]).expect("row");
                policy.evaluate(view).1[0]
            }
            None => T::zero(),
        };
        let (adv, ret) = gae(&batch.rewards, &batch.values, &batch.dones, last_value, cfg);
        batch.advantages = adv;
        batch.returns = ret;
        batch.observations = observations;
        Ok(batch)
    }
}

/// Generalized advantage estimates and value targets. `dones[k]` marks that
/// the episode ended at step `k`; `last_value` bootstraps an unfinished tail.
pub fn gae<T: Scalar>(
    rewards: &[f64],
    values: &[T],
    dones: &[bool],
    last_value: T,
    cfg: &PpoConfig,
) -> (Vec<T>, Vec<T>) {
    let n = rewards.len();
    let gamma = T::lit(cfg.gamma);
    let lam = T::lit(cfg.gae_lambda);
    let mut adv = vec![T::zero(); n];
    let mut running = T::zero();
    for k in (0..n).rev() {
        let (next_value, live) = if dones[k] {
            (T::zero(), T::zero())
        } else if k + 1 < n {
            (values[k + 1], T::one())
        } else {
            (last_value, T::one())
        };
        let delta = T::lit(rewards[k]) + gamma * next_value * live - values[k];
        running = delta + gamma * lam * live * running;
        adv[k] = running;
    }
    let ret = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    (adv, ret)
}

fn normalize<T: Scalar>(xs: &mut [T]) {
    if xs.len() < 2 {
        return;
    }
    let n = T::from_usize(xs.len()).expect("usize fits");
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let sd = var.sqrt() + T::lit(1e-8);
    for x in xs {
        *x = (*x - mean) / sd;
    }
}

/// Optimizer state for repeated updates of one policy.
pub struct Trainer<T> {
    pub cfg: PpoConfig,
    opt: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(policy: &PolicyNetwork<T>, cfg: PpoConfig) -> Self {
        let opt = Adam::new(
            policy.params().len(),
            AdamConfig {
                eps: 1e-5,
                ..AdamConfig::with_lr(cfg.lr)
            },
        );
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        Self { cfg, opt, rng }
    }

    /// `epochs` passes of shuffled minibatch steps; advantages are
    /// normalized per minibatch. Returns stats averaged over minibatches.
    pub fn update(&mut self, policy: &mut PolicyNetwork<T>, batch: &RolloutBatch<T>) -> Result<LossStats> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::invalid("empty rollout batch"));
        }
        let mb = self.cfg.minibatch.clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut total = LossStats::default();
        let mut count = 0.0;
        for _ in 0..self.cfg.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(mb) {
                let obs = batch.observations.select(Axis(0), chunk);
                let pick = |v: &[T]| chunk.iter().map(|&i| v[i]).collect::<Vec<T>>();
                let actions = pick(&batch.actions);
                let old = pick(&batch.log_probs);
                let mut adv = pick(&batch.advantages);
                normalize(&mut adv);
                let ret = pick(&batch.returns);
                let inputs = LossInputs {
                    obs: obs.view(),
                    actions: &actions,
                    old_log_probs: &old,
                    advantages: &adv,
                    returns: &ret,
                };
                let (loss, mut grad, stats) = policy.loss_and_grad(&inputs, &self.cfg);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("ppo loss {loss}")));
                }
                clip_grad_norm(&mut grad, self.cfg.max_grad_norm);
                self.opt.step(policy.params_mut(), &grad);
                total.policy_loss += stats.policy_loss;
                total.value_loss += stats.value_loss;
                total.entropy += stats.entropy;
                total.approx_kl += stats.approx_kl;
                total.clip_fraction += stats.clip_fraction;
                count += 1.0;
            }
        }
        Ok(LossStats {
            policy_loss: total.policy_loss / count,
            value_loss: total.value_loss / count,
            entropy: total.entropy / count,
            approx_kl: total.approx_kl / count,
            clip_fraction: total.clip_fraction / count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean return of episodes finished in this rollout; NaN if none did.
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Value reported by the evaluation hook, if it ran.
    pub eval: Option<f64>,
    pub wall_seconds: f64,
}

/// Alternates collection and updates until `total_steps` transitions have
/// been gathered. `on_update` sees each curve point and the current policy;
/// its return value is stored as the point's `eval`, and returning
/// `ControlFlow::Break` stops training.
pub fn train<T, E, F>(
    env: &mut E,
    policy: PolicyNetwork<T>,
    cfg: &PpoConfig,
    total_steps: usize,
    mut on_update: F,
) -> Result<(PolicyNetwork<T>, Vec<CurvePoint>)>
where
    T: Scalar,
    E: Environment<T>,
    F: FnMut(&CurvePoint, &PolicyNetwork<T>) -> ControlFlow<Option<f64>, Option<f64>>,
{
    let mut policy = policy;
    let mut curve = Vec::new();
    let mut trainer = Trainer::new(&policy, cfg.clone());
    let mut collector = Collector::new(cfg.seed.wrapping_add(1));
    let start = Instant::now();
    let mut done_steps = 0;
    while done_steps < total_steps {
        let n = cfg.n_steps.min(total_steps - done_steps);
        let batch = collector.collect(env, &policy, n, cfg)?;
        let stats = trainer.update(&mut policy, &batch)?;
        done_steps += n;
        let mean_reward = if batch.episode_returns.is_empty() {
            f64::NAN
        } else {
            batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64
        };
        let mut point = CurvePoint {
            step: done_steps,
            mean_reward,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            eval: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        tracing::debug!(step = done_steps, mean_reward, kl = stats.approx_kl, "ppo update");
        let flow = on_update(&point, &policy);
        let (eval, stop) = match flow {
            ControlFlow::Continue(e) => (e, false),
            ControlFlow::Break(e) => (e, true),
        };
        point.eval = eval;
        curve.push(point);
        if stop {
            break;
        }
    }
    Ok((policy, curve))
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "step",
        "mean_reward",
        "policy_loss",
        "value_loss",
        "eval",
        "wall_seconds",
    ])?;
    for p in curve {
        wtr.write_record([
            p.step.to_string(),
            p.mean_reward.to_string(),
            p.policy_loss.to_string(),
            p.value_loss.to_string(),
            p.eval.map(|e| e.to_string()).unwrap_or_default(),
            format!("{:.3}", p.wall_seconds),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_of_zero_signal_is_zero() {
        let cfg = PpoConfig::default();
        let (adv, ret) = gae(&[0.0; 5], &[0.0f64; 5], &[false, true, false, false, true], 0.0, &cfg);
        assert!(adv.iter().chain(&ret).all(|&v| v == 0.0));
    }

    #[test]
    fn gae_single_terminal_step() {
        let cfg = PpoConfig::default();
        let (adv, ret) = gae(&[1.0], &[0.25f64], &[true], 9.0, &cfg);
        assert_eq!(adv, vec![0.75]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn normalize_guards_single_sample() {
        let mut one = vec![3.0f64];
        normalize(&mut one);
        assert_eq!(one, vec![3.0]);
        let mut xs = vec![1.0f64, 3.0];
        normalize(&mut xs);
        assert!((xs[0] + 1.0).abs() < 1e-6 && (xs[1] - 1.0).abs() < 1e-6);
    }
}
