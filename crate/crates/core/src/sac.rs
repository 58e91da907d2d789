//! Soft actor-critic on latent states: tanh-squashed Gaussian actor, twin
//! critics with Polyak-averaged targets, learned temperature, and a replay
//! buffer. Updates operate on encoded batches and hand back the critic-loss
//! gradient with respect to the latents so the caller can train the encoder.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{polyak_update, Activation, AdamState, Mlp, MlpOptimizer, MlpSpec};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// true only for genuine terminal states; episode-cap truncations keep
    /// bootstrapping
    pub done: bool,
}

/// Sampled minibatch in array form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Array1<f64>,
    /// buffer slots the batch was drawn from (for paired sampling schemes)
    pub indices: Vec<usize>,
}

/// Fixed-capacity ring buffer with FIFO eviction and uniform sampling
/// with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            data: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.data[idx]
    }

    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..self.data.len())).collect()
    }

    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if self.data.is_empty() {
            return Err(Error::InvalidArgument("sampling from empty replay buffer".into()));
        }
        let indices = self.sample_indices(batch, rng);
        self.gather(&indices)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let obs_dim = self.data[0].obs.len();
        let act_dim = self.data[0].action.len();
        let b = indices.len();
        let mut obs = Array2::zeros((b, obs_dim));
        let mut actions = Array2::zeros((b, act_dim));
        let mut rewards = Array1::zeros(b);
        let mut next_obs = Array2::zeros((b, obs_dim));
        let mut dones = Array1::zeros(b);
        for (k, &idx) in indices.iter().enumerate() {
            let t = &self.data[idx];
            for (j, &x) in t.obs.iter().enumerate() {
                obs[[k, j]] = x;
            }
            for (j, &x) in t.action.iter().enumerate() {
                actions[[k, j]] = x;
            }
            rewards[k] = t.reward;
            for (j, &x) in t.next_obs.iter().enumerate() {
                next_obs[[k, j]] = x;
            }
            dones[k] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(Batch {
            obs,
            actions,
            rewards,
            next_obs,
            dones,
            indices: indices.to_vec(),
        })
    }
}

// ---------------------------------------------------------------------------
// Actor
// ---------------------------------------------------------------------------

/// Gaussian policy head: the network emits (mean, raw log-std) per action
/// dim; log-std is smoothly rescaled into [LOG_STD_MIN, LOG_STD_MAX] and the
/// sampled pre-activation is tanh-squashed into [-1, 1].
#[derive(Debug, Clone)]
pub struct Actor {
    pub net: Mlp,
    pub action_dim: usize,
}

pub struct ActorCache {
    net_cache: crate::nn::ForwardCache,
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    /// tanh of the raw log-std pre-activation (for the rescale derivative)
    tanh_raw: Array2<f64>,
}

pub struct ActorSample {
    /// pre-squash samples mean + std * eps
    pub pre: Array2<f64>,
    pub action: Array2<f64>,
    /// per-sample log pi(a|z) with the tanh change-of-variables correction
    pub log_prob: Array1<f64>,
    pub eps: Array2<f64>,
}

impl Actor {
    pub fn new(latent_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut widths = vec![latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * action_dim);
        Ok(Self {
            net: Mlp::init(MlpSpec::new(widths, Activation::Identity)?, rng),
            action_dim,
        })
    }

    pub fn forward(&self, latents: &Array2<f64>) -> Result<ActorCache> {
        let net_cache = self.net.forward(latents)?;
        let b = latents.nrows();
        let ad = self.action_dim;
        let mut mean = Array2::zeros((b, ad));
        let mut log_std = Array2::zeros((b, ad));
        let mut tanh_raw = Array2::zeros((b, ad));
        for k in 0..b {
            for d in 0..ad {
                mean[[k, d]] = net_cache.output[[k, d]];
                let t = net_cache.output[[k, ad + d]].tanh();
                tanh_raw[[k, d]] = t;
                log_std[[k, d]] =
                    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (t + 1.0);
            }
        }
        Ok(ActorCache {
            net_cache,
            mean,
            log_std,
            tanh_raw,
        })
    }

    /// Reparameterized sample with explicit standard-normal noise.
    pub fn sample_with_noise(&self, cache: &ActorCache, eps: Array2<f64>) -> ActorSample {
        let (b, ad) = cache.mean.dim();
        let mut pre = Array2::zeros((b, ad));
        let mut action = Array2::zeros((b, ad));
        let mut log_prob = Array1::zeros(b);
        for k in 0..b {
            let mut lp = 0.0;
            for d in 0..ad {
                let ls = cache.log_std[[k, d]];
                let u = cache.mean[[k, d]] + ls.exp() * eps[[k, d]];
                let a = u.tanh();
                pre[[k, d]] = u;
                action[[k, d]] = a;
                lp += -0.5 * eps[[k, d]] * eps[[k, d]] - ls - 0.5 * LN_2PI
                    - (1.0 - a * a + SQUASH_EPS).ln();
            }
            log_prob[k] = lp;
        }
        ActorSample {
            pre,
            action,
            log_prob,
            eps,
        }
    }

    pub fn sample(&self, cache: &ActorCache, rng: &mut ChaCha8Rng) -> ActorSample {
        let (b, ad) = cache.mean.dim();
        let eps = Array2::from_shape_fn((b, ad), |_| standard_normal(rng));
        self.sample_with_noise(cache, eps)
    }

    /// Deterministic policy: tanh of the mean. This is the pi-bar used for
    /// latent dynamics comparisons and greedy evaluation.
    pub fn mean_action(&self, cache: &ActorCache) -> Array2<f64> {
        cache.mean.mapv(f64::tanh)
    }

    /// Backpropagate `d_action` (dL/da) and `d_logprob` (dL/dlogpi) through
    /// the squash, the reparameterized sample, and the network. Returns
    /// dL/dlatent.
    pub fn backward(
        &mut self,
        cache: &ActorCache,
        sample: &ActorSample,
        d_action: &Array2<f64>,
        d_logprob: &Array1<f64>,
    ) -> Result<Array2<f64>> {
        let (b, ad) = cache.mean.dim();
        let mut upstream = Array2::zeros((b, 2 * ad));
        for k in 0..b {
            for d in 0..ad {
                let a = sample.action[[k, d]];
                let one_m_a2 = 1.0 - a * a;
                let t = one_m_a2 + SQUASH_EPS;
                // d logpi / du through the squash correction
                let dlp_du = 2.0 * a * one_m_a2 / t;
                let du = d_action[[k, d]] * one_m_a2 + d_logprob[k] * dlp_du;
                let std = cache.log_std[[k, d]].exp();
                let d_mean = du;
                let d_log_std = du * std * sample.eps[[k, d]] - d_logprob[k];
                let tr = cache.tanh_raw[[k, d]];
                let d_raw = d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - tr * tr);
                upstream[[k, d]] = d_mean;
                upstream[[k, ad + d]] = d_raw;
            }
        }
        self.net.backward(&cache.net_cache, &upstream)
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Critics
// ---------------------------------------------------------------------------

/// Q network over concatenated (latent, action).
#[derive(Debug, Clone)]
pub struct Critic {
    pub net: Mlp,
    latent_dim: usize,
    action_dim: usize,
}

pub struct CriticCache {
    net_cache: crate::nn::ForwardCache,
    pub q: Array1<f64>,
}

impl Critic {
    pub fn new(latent_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut widths = vec![latent_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            net: Mlp::init(MlpSpec::new(widths, Activation::Identity)?, rng),
            latent_dim,
            action_dim,
        })
    }

    fn concat(&self, latents: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let b = latents.nrows();
        let mut x = Array2::zeros((b, self.latent_dim + self.action_dim));
        for k in 0..b {
            for j in 0..self.latent_dim {
                x[[k, j]] = latents[[k, j]];
            }
            for j in 0..self.action_dim {
                x[[k, self.latent_dim + j]] = actions[[k, j]];
            }
        }
        x
    }

    pub fn forward(&self, latents: &Array2<f64>, actions: &Array2<f64>) -> Result<CriticCache> {
        let net_cache = self.net.forward(&self.concat(latents, actions))?;
        let q = net_cache.output.index_axis(Axis(1), 0).to_owned();
        Ok(CriticCache { net_cache, q })
    }

    pub fn values(&self, latents: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(latents, actions)?.q)
    }

    /// Backprop per-sample upstream dL/dQ; returns (dL/dlatent, dL/daction).
    pub fn backward(
        &mut self,
        cache: &CriticCache,
        upstream: &Array1<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let b = upstream.len();
        let up = upstream.to_owned().into_shape_with_order((b, 1)).unwrap();
        let din = self.net.backward(&cache.net_cache, &up)?;
        let d_latent = din.slice(ndarray::s![.., ..self.latent_dim]).to_owned();
        let d_action = din.slice(ndarray::s![.., self.latent_dim..]).to_owned();
        Ok((d_latent, d_action))
    }
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacHyper {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    /// actor/temperature updates every this many critic updates
    pub update_freq: usize,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-5,
            critic_lr: 1e-5,
            alpha_lr: 1e-4,
            init_alpha: 0.1,
            update_freq: 2,
        }
    }
}

/// Latent batch handed to the SAC update. `latents` come from the online
/// encoder (the update returns their gradient); `next_latents` come from the
/// target encoder and are treated as constants.
pub struct LatentBatch {
    pub latents: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_latents: Array2<f64>,
    pub dones: Array1<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SacReport {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
}

pub struct SacAgent {
    pub actor: Actor,
    pub q1: Critic,
    pub q2: Critic,
    pub q1_target: Critic,
    pub q2_target: Critic,
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub hyper: SacHyper,
    actor_opt: MlpOptimizer,
    q1_opt: MlpOptimizer,
    q2_opt: MlpOptimizer,
    alpha_opt: AdamState,
    updates: usize,
}

impl SacAgent {
    /// Rescale every optimizer's learning rate relative to its configured
    /// base value (used for learning-rate schedules).
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.actor_opt.adam.lr = self.hyper.actor_lr * scale;
        self.q1_opt.adam.lr = self.hyper.critic_lr * scale;
        self.q2_opt.adam.lr = self.hyper.critic_lr * scale;
        self.alpha_opt.lr = self.hyper.alpha_lr * scale;
    }

    pub fn new(
        latent_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        hyper: SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let actor = Actor::new(latent_dim, hidden, action_dim, rng)?;
        let q1 = Critic::new(latent_dim, hidden, action_dim, rng)?;
        let q2 = Critic::new(latent_dim, hidden, action_dim, rng)?;
        let q1_target = q1.clone();
        let q2_target = q2.clone();
        let actor_opt = MlpOptimizer::new(&actor.net, hyper.actor_lr);
        let q1_opt = MlpOptimizer::new(&q1.net, hyper.critic_lr);
        let q2_opt = MlpOptimizer::new(&q2.net, hyper.critic_lr);
        let alpha_opt = AdamState::new(1, hyper.alpha_lr);
        Ok(Self {
            actor,
            q1,
            q2,
            q1_target,
            q2_target,
            log_alpha: hyper.init_alpha.ln(),
            target_entropy: -(action_dim as f64),
            hyper,
            actor_opt,
            q1_opt,
            q2_opt,
            alpha_opt,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Select an action for a single latent state.
    pub fn act(&self, latent: &[f64], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let z = Array2::from_shape_vec((1, latent.len()), latent.to_vec())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let cache = self.actor.forward(&z)?;
        let a = if deterministic {
            self.actor.mean_action(&cache)
        } else {
            self.actor.sample(&cache, rng).action
        };
        Ok(a.row(0).to_vec())
    }

    /// One SAC step: always a twin-critic TD update; every `update_freq`
    /// calls also an actor and temperature update plus Polyak target sync.
    /// Returns the report and d(critic loss)/d(latents) for encoder training.
    pub fn update(&mut self, batch: &LatentBatch, rng: &mut ChaCha8Rng) -> Result<(SacReport, Array2<f64>)> {
        let b = batch.latents.nrows();
        let alpha = self.alpha();

        // targets: fresh next action from the current policy
        let next_cache = self.actor.forward(&batch.next_latents)?;
        let next_sample = self.actor.sample(&next_cache, rng);
        let tq1 = self.q1_target.values(&batch.next_latents, &next_sample.action)?;
        let tq2 = self.q2_target.values(&batch.next_latents, &next_sample.action)?;
        let mut y = Array1::zeros(b);
        for k in 0..b {
            let v_bar = tq1[k].min(tq2[k]) - alpha * next_sample.log_prob[k];
            y[k] = batch.rewards[k] + self.hyper.gamma * (1.0 - batch.dones[k]) * v_bar;
        }

        // critic update; gradients flow into the latents
        self.q1.net.zero_grad();
        self.q2.net.zero_grad();
        let c1 = self.q1.forward(&batch.latents, &batch.actions)?;
        let c2 = self.q2.forward(&batch.latents, &batch.actions)?;
        let mut critic_loss = 0.0;
        let mut up1 = Array1::zeros(b);
        let mut up2 = Array1::zeros(b);
        for k in 0..b {
            let e1 = c1.q[k] - y[k];
            let e2 = c2.q[k] - y[k];
            critic_loss += (e1 * e1 + e2 * e2) / b as f64;
            up1[k] = 2.0 * e1 / b as f64;
            up2[k] = 2.0 * e2 / b as f64;
        }
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        let (dz1, _) = self.q1.backward(&c1, &up1)?;
        let (dz2, _) = self.q2.backward(&c2, &up2)?;
        let d_latents = dz1 + dz2;
        self.q1_opt.step(&mut self.q1.net);
        self.q2_opt.step(&mut self.q2.net);

        self.updates += 1;
        let mut actor_loss = None;
        if self.updates % self.hyper.update_freq == 0 {
            // actor update on detached latents
            self.actor.net.zero_grad();
            let cache = self.actor.forward(&batch.latents)?;
            let sample = self.actor.sample(&cache, rng);
            let q1c = self.q1.forward(&batch.latents, &sample.action)?;
            let q2c = self.q2.forward(&batch.latents, &sample.action)?;
            let mut loss = 0.0;
            let mut uq1 = Array1::zeros(b);
            let mut uq2 = Array1::zeros(b);
            let mut d_logp = Array1::zeros(b);
            for k in 0..b {
                let (qmin, use_q1) = if q1c.q[k] <= q2c.q[k] {
                    (q1c.q[k], true)
                } else {
                    (q2c.q[k], false)
                };
                loss += (alpha * sample.log_prob[k] - qmin) / b as f64;
                if use_q1 {
                    uq1[k] = -1.0 / b as f64;
                } else {
                    uq2[k] = -1.0 / b as f64;
                }
                d_logp[k] = alpha / b as f64;
            }
            // Q parameters are frozen for this loss: backward only to get
            // dL/da, then clear the accumulated critic gradients
            let (_, da1) = self.q1.backward(&q1c, &uq1)?;
            let (_, da2) = self.q2.backward(&q2c, &uq2)?;
            self.q1.net.zero_grad();
            self.q2.net.zero_grad();
            let d_action = da1 + da2;
            self.actor.backward(&cache, &sample, &d_action, &d_logp)?;
            self.actor_opt.step(&mut self.actor.net);
            if !loss.is_finite() {
                return Err(Error::NonFinite("actor loss".into()));
            }
            actor_loss = Some(loss);

            // temperature: J(alpha) = -alpha (log pi + H_target), log pi detached
            let mean_lp = sample.log_prob.iter().sum::<f64>() / b as f64;
            let grad = -self.alpha() * (mean_lp + self.target_entropy);
            let mut la = [self.log_alpha];
            self.alpha_opt.step(&mut la, &[grad]);
            self.log_alpha = la[0];

            self.sync_targets()?;
        }

        Ok((
            SacReport {
                critic_loss,
                actor_loss,
                alpha: self.alpha(),
            },
            d_latents,
        ))
    }
}

impl SacAgent {
    fn sync_targets(&mut self) -> Result<()> {
        polyak_update(&mut self.q1_target.net, &self.q1.net, self.hyper.tau)?;
        polyak_update(&mut self.q2_target.net, &self.q2.net, self.hyper.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::nn::finite_diff_relative_error;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_transition(i: usize) -> Transition {
        Transition {
            obs: vec![i as f64],
            action: vec![0.0],
            reward: i as f64,
            next_obs: vec![i as f64 + 1.0],
            done: false,
        }
    }

    #[test]
    fn replay_fifo_eviction() {
        let mut buf = ReplayBuffer::new(4);
        for i in 0..6 {
            buf.push(toy_transition(i));
        }
        assert_eq!(buf.len(), 4);
        let kept: Vec<f64> = (0..4).map(|i| buf.get(i).reward).collect();
        let mut sorted = kept.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..3 {
            buf.push(toy_transition(i));
        }
        let mut r = rng(0);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for idx in buf.sample_indices(n, &mut r) {
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn replay_empty_sampling_errors() {
        let buf = ReplayBuffer::new(4);
        assert!(buf.sample(2, &mut rng(0)).is_err());
    }

    #[test]
    fn actor_log_std_respects_bounds() {
        let mut r = rng(1);
        let actor = Actor::new(3, &[16], 2, &mut r).unwrap();
        let z = Array2::from_shape_fn((8, 3), |_| standard_normal(&mut r) * 50.0);
        let cache = actor.forward(&z).unwrap();
        for &ls in cache.log_std.iter() {
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&ls));
        }
        for &a in actor.sample(&cache, &mut r).action.iter() {
            assert!(a.abs() <= 1.0);
        }
    }

    #[test]
    fn actor_sample_matches_gaussian_moments() {
        let mut r = rng(2);
        let actor = Actor::new(2, &[8], 1, &mut r).unwrap();
        let z = Array2::from_shape_vec((1, 2), vec![0.3, -0.7]).unwrap();
        let cache = actor.forward(&z).unwrap();
        let (mean, std) = (cache.mean[[0, 0]], cache.log_std[[0, 0]].exp());
        let n = 200_000;
        let big = Array2::from_shape_fn((n, 2), |(_, j)| z[[0, j]]);
        let big_cache = actor.forward(&big).unwrap();
        let s = actor.sample(&big_cache, &mut r);
        let emp_mean = s.pre.column(0).sum() / n as f64;
        let emp_var = s.pre.column(0).mapv(|x| (x - emp_mean).powi(2)).sum() / n as f64;
        assert!((emp_mean - mean).abs() < 5.0 * std / (n as f64).sqrt() + 1e-3);
        assert!((emp_var.sqrt() - std).abs() / std < 0.02);
    }

    #[test]
    fn log_prob_matches_independent_formula() {
        let mut r = rng(3);
        let actor = Actor::new(2, &[8], 2, &mut r).unwrap();
        let z = Array2::from_shape_fn((4, 2), |_| standard_normal(&mut r));
        let cache = actor.forward(&z).unwrap();
        let s = actor.sample(&cache, &mut r);
        for k in 0..4 {
            let mut expect = 0.0;
            for d in 0..2 {
                let (m, ls) = (cache.mean[[k, d]], cache.log_std[[k, d]]);
                let std = ls.exp();
                let u = s.pre[[k, d]];
                // N(u; m, std) density evaluated directly
                expect += -0.5 * ((u - m) / std).powi(2) - ls - 0.5 * LN_2PI;
                expect -= (1.0 - u.tanh().powi(2) + SQUASH_EPS).ln();
            }
            assert!((expect - s.log_prob[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn actor_backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let mut actor = Actor::new(3, &[6], 2, &mut r).unwrap();
            let z = Array2::from_shape_fn((4, 3), |_| standard_normal(&mut r));
            let eps = Array2::from_shape_fn((4, 2), |_| standard_normal(&mut r));
            let wa = Array2::from_shape_fn((4, 2), |_| standard_normal(&mut r));
            let wl = Array1::from_shape_fn(4, |_| standard_normal(&mut r));

            let cache = actor.forward(&z).unwrap();
            let sample = actor.sample_with_noise(&cache, eps.clone());
            actor.net.zero_grad();
            actor.backward(&cache, &sample, &wa, &wl).unwrap();
            let analytic = actor.net.flatten_grads();
            let params = actor.net.flatten_params();

            let spec = actor.net.spec.clone();
            let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                let mut net = Mlp::zeros(spec.clone());
                net.set_params(p);
                let probe = Actor { net, action_dim: 2 };
                let c = probe.forward(&z).unwrap();
                let s = probe.sample_with_noise(&c, eps.clone());
                let mut loss = 0.0;
                for k in 0..4 {
                    for d in 0..2 {
                        loss += wa[[k, d]] * s.action[[k, d]];
                    }
                    loss += wl[k] * s.log_prob[k];
                }
                loss
            });
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn critic_backward_matches_finite_differences() {
        let mut r = rng(4);
        let mut critic = Critic::new(3, &[5], 2, &mut r).unwrap();
        let z = Array2::from_shape_fn((3, 3), |_| standard_normal(&mut r));
        let a = Array2::from_shape_fn((3, 2), |_| standard_normal(&mut r)).mapv(f64::tanh);
        let w = Array1::from_shape_fn(3, |_| standard_normal(&mut r));

        let cache = critic.forward(&z, &a).unwrap();
        critic.net.zero_grad();
        critic.backward(&cache, &w).unwrap();
        let analytic = critic.net.flatten_grads();
        let params = critic.net.flatten_params();
        let spec = critic.net.spec.clone();
        let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
            let mut net = Mlp::zeros(spec.clone());
            net.set_params(p);
            let probe = Critic { net, latent_dim: 3, action_dim: 2 };
            let q = probe.values(&z, &a).unwrap();
            q.iter().zip(w.iter()).map(|(qi, wi)| qi * wi).sum()
        });
        assert!(err < 1e-4, "rel err {err}");
    }

    fn toy_latent_batch(r: &mut ChaCha8Rng, b: usize) -> LatentBatch {
        LatentBatch {
            latents: Array2::from_shape_fn((b, 3), |_| standard_normal(r)),
            actions: Array2::from_shape_fn((b, 2), |_| standard_normal(r)).mapv(f64::tanh),
            rewards: Array1::from_shape_fn(b, |_| r.random::<f64>()),
            next_latents: Array2::from_shape_fn((b, 3), |_| standard_normal(r)),
            dones: Array1::zeros(b),
        }
    }

    #[test]
    fn targets_move_by_polyak_only() {
        let mut r = rng(5);
        let mut agent = SacAgent::new(3, 2, &[8], SacHyper::default(), &mut r).unwrap();
        let before_online = agent.q1.net.flatten_params();
        let before_target = agent.q1_target.net.flatten_params();
        assert_eq!(before_online, before_target);

        let batch = toy_latent_batch(&mut r, 16);
        agent.update(&batch, &mut r).unwrap(); // 1st update: no target sync
        assert_eq!(agent.q1_target.net.flatten_params(), before_target);
        agent.update(&batch, &mut r).unwrap(); // 2nd: polyak with tau
        let after_target = agent.q1_target.net.flatten_params();
        let online = agent.q1.net.flatten_params();
        let tau = agent.hyper.tau;
        for ((&t1, &t0), &w) in after_target.iter().zip(&before_target).zip(&online) {
            assert!((t1 - ((1.0 - tau) * t0 + tau * w)).abs() < 1e-12);
        }
    }

    #[test]
    fn critic_latent_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let mut agent = SacAgent::new(3, 2, &[6], SacHyper::default(), &mut r).unwrap();
        let batch = toy_latent_batch(&mut r, 4);

        // freeze everything stochastic: replay the same rng for both paths
        let probe_rng = r.clone();
        let mut r1 = probe_rng.clone();
        let (_, d_z) = agent.update(&batch, &mut r1).unwrap();

        // finite differences of the critic loss wrt latents, recomputed with
        // the pre-update parameters and the same target noise
        let agent2 = SacAgent::new(3, 2, &[6], SacHyper::default(), &mut rng(6)).unwrap();
        let loss_at = |z: &Array2<f64>| -> f64 {
            let mut rr = probe_rng.clone();
            let cache = agent2.actor.forward(&batch.next_latents).unwrap();
            let s = agent2.actor.sample(&cache, &mut rr);
            let tq1 = agent2.q1_target.values(&batch.next_latents, &s.action).unwrap();
            let tq2 = agent2.q2_target.values(&batch.next_latents, &s.action).unwrap();
            let alpha = agent2.alpha();
            let mut loss = 0.0;
            let q1 = agent2.q1.values(z, &batch.actions).unwrap();
            let q2 = agent2.q2.values(z, &batch.actions).unwrap();
            for k in 0..4 {
                let y = batch.rewards[k]
                    + agent2.hyper.gamma * (tq1[k].min(tq2[k]) - alpha * s.log_prob[k]);
                loss += ((q1[k] - y).powi(2) + (q2[k] - y).powi(2)) / 4.0;
            }
            loss
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut z = batch.latents.clone();
        for k in 0..4 {
            for j in 0..3 {
                let orig = z[[k, j]];
                z[[k, j]] = orig + h;
                let up = loss_at(&z);
                z[[k, j]] = orig - h;
                let down = loss_at(&z);
                z[[k, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = d_z[[k, j]];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn alpha_moves_against_entropy_gap() {
        // entropy far above target (log pi << -H) lowers alpha; far below
        // raises it. Force each regime via an extreme entropy target.
        for (target, expect_up) in [(100.0, true), (-100.0, false)] {
            let mut r = rng(7);
            let mut hyper = SacHyper::default();
            hyper.alpha_lr = 1e-2;
            hyper.update_freq = 1;
            let mut agent = SacAgent::new(2, 1, &[4], hyper, &mut r).unwrap();
            agent.target_entropy = target;
            let a0 = agent.alpha();
            let batch = toy_latent_batch_dim(&mut r, 8);
            for _ in 0..5 {
                agent.update(&batch, &mut r).unwrap();
            }
            assert_eq!(agent.alpha() > a0, expect_up, "target {target}");
        }
    }

    #[test]
    fn critic_fits_fixed_targets() {
        // supervised sanity: with gamma = 0 the TD target is just the reward
        let mut r = rng(8);
        let mut hyper = SacHyper::default();
        hyper.gamma = 0.0;
        hyper.critic_lr = 3e-3;
        let mut agent = SacAgent::new(2, 1, &[16], hyper, &mut r).unwrap();
        let batch = toy_latent_batch_dim(&mut r, 32);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for i in 0..2000 {
            let (rep, _) = agent.update(&batch, &mut r).unwrap();
            if i == 0 {
                first = rep.critic_loss;
            }
            last = rep.critic_loss;
        }
        assert!(last < 0.05 * first, "critic loss {first} -> {last}");
    }

    fn toy_latent_batch_dim(r: &mut ChaCha8Rng, b: usize) -> LatentBatch {
        LatentBatch {
            latents: Array2::from_shape_fn((b, 2), |_| standard_normal(r)),
            actions: Array2::from_shape_fn((b, 1), |_| standard_normal(r)).mapv(f64::tanh),
            rewards: Array1::from_shape_fn(b, |_| r.random::<f64>()),
            next_latents: Array2::from_shape_fn((b, 2), |_| standard_normal(r)),
            dones: Array1::zeros(b),
        }
    }

    #[test]
    fn update_is_deterministic_for_fixed_seed() {
        let run = || {
            let mut r = rng(9);
            let mut agent = SacAgent::new(3, 2, &[8], SacHyper::default(), &mut r).unwrap();
            for _ in 0..10 {
                let batch = toy_latent_batch(&mut r, 8);
                agent.update(&batch, &mut r).unwrap();
            }
            let mut out = agent.actor.net.flatten_params();
            out.extend(agent.q1.net.flatten_params());
            out.extend(agent.q1_target.net.flatten_params());
            out.push(agent.log_alpha);
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn act_is_bounded_and_deterministic_mode_is_stable() {
        let mut r = rng(10);
        let agent = SacAgent::new(3, 2, &[8], SacHyper::default(), &mut r).unwrap();
        let z = vec![0.1, -0.2, 0.3];
        let a1 = agent.act(&z, true, &mut r).unwrap();
        let a2 = agent.act(&z, true, &mut r).unwrap();
        assert_eq!(a1, a2);
        for _ in 0..20 {
            for &a in &agent.act(&z, false, &mut r).unwrap() {
                assert!(a.abs() <= 1.0);
            }
        }
    }
}
