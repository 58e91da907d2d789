//! Bisimulation-based representation learning: encoder trained with the
//! paired-batch bisimulation loss, Gaussian latent dynamics and reward
//! models, and two baseline encoder losses (learned distance network,
//! reconstruction). Stop-gradient discipline: the bisimulation target
//! (reward gap + W2 between predicted latent dynamics) is a constant with
//! respect to the encoder; gradients flow only through the l1 term.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{polyak_update, Activation, ForwardCache, Mlp, MlpOptimizer, MlpSpec};
use crate::sac::{Batch, LatentBatch, SacAgent, SacHyper, SacReport};
use crate::{Error, Result};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dbc,
    Castro,
    Reconstruction,
    SacRaw,
}

// ---------------------------------------------------------------------------
// Encoder with Polyak target
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Encoder {
    pub net: Mlp,
    pub target: Mlp,
}

impl Encoder {
    pub fn new(obs_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_activation(obs_dim, hidden, latent_dim, Activation::Identity, rng)
    }

    pub fn with_activation(
        obs_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut widths = vec![obs_dim];
        widths.extend_from_slice(hidden);
        widths.push(latent_dim);
        let net = Mlp::init(MlpSpec::new(widths, output)?, rng);
        let target = net.clone();
        Ok(Self { net, target })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec.output_dim()
    }

    pub fn encode(&self, obs: &Array2<f64>) -> Result<ForwardCache> {
        self.net.forward(obs)
    }

    pub fn encode_values(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.net.forward(obs)?.output)
    }

    pub fn encode_target(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.target.forward(obs)?.output)
    }

    pub fn sync_target(&mut self, tau: f64) -> Result<()> {
        polyak_update(&mut self.target, &self.net, tau)
    }
}

// ---------------------------------------------------------------------------
// Latent dynamics and reward models
// ---------------------------------------------------------------------------

/// Gaussian latent transition model: (z, a) -> diagonal Gaussian over next z.
/// The stddev head is smoothly rescaled into [SIGMA_MIN, SIGMA_MAX].
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub latent_dim: usize,
    pub action_dim: usize,
    /// literal squared-error training mode: sigma pinned to 1, untrained
    pub fixed_sigma: bool,
}

pub struct DynCache {
    net_cache: ForwardCache,
    pub mean: Array2<f64>,
    pub sigma: Array2<f64>,
}

impl DynamicsModel {
    pub fn new(
        latent_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        fixed_sigma: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut widths = vec![latent_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * latent_dim);
        Ok(Self {
            net: Mlp::init(MlpSpec::new(widths, Activation::Identity)?, rng),
            latent_dim,
            action_dim,
            fixed_sigma,
        })
    }

    pub fn forward(&self, latents: &Array2<f64>, actions: &Array2<f64>) -> Result<DynCache> {
        let b = latents.nrows();
        if actions.nrows() != b {
            return Err(Error::DimensionMismatch(format!(
                "latent batch {b} vs action batch {}",
                actions.nrows()
            )));
        }
        let mut x = Array2::zeros((b, self.latent_dim + self.action_dim));
        for k in 0..b {
            for j in 0..self.latent_dim {
                x[[k, j]] = latents[[k, j]];
            }
            for j in 0..self.action_dim {
                x[[k, self.latent_dim + j]] = actions[[k, j]];
            }
        }
        let net_cache = self.net.forward(&x)?;
        let kdim = self.latent_dim;
        let mut mean = Array2::zeros((b, kdim));
        let mut sigma = Array2::zeros((b, kdim));
        for k in 0..b {
            for d in 0..kdim {
                mean[[k, d]] = net_cache.output[[k, d]];
                sigma[[k, d]] = if self.fixed_sigma {
                    1.0
                } else {
                    let s = 1.0 / (1.0 + (-net_cache.output[[k, kdim + d]]).exp());
                    SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * s
                };
            }
        }
        Ok(DynCache {
            net_cache,
            mean,
            sigma,
        })
    }

    /// Backprop dL/dmean and dL/dsigma; returns (dL/dlatent, dL/daction).
    pub fn backward(
        &mut self,
        cache: &DynCache,
        d_mean: &Array2<f64>,
        d_sigma: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (b, kdim) = cache.mean.dim();
        let mut upstream = Array2::zeros((b, 2 * kdim));
        for k in 0..b {
            for d in 0..kdim {
                upstream[[k, d]] = d_mean[[k, d]];
                if !self.fixed_sigma {
                    let s = (cache.sigma[[k, d]] - SIGMA_MIN) / (SIGMA_MAX - SIGMA_MIN);
                    upstream[[k, kdim + d]] =
                        d_sigma[[k, d]] * (SIGMA_MAX - SIGMA_MIN) * s * (1.0 - s);
                }
            }
        }
        let din = self.net.backward(&cache.net_cache, &upstream)?;
        let d_latent = din.slice(ndarray::s![.., ..self.latent_dim]).to_owned();
        let d_action = din.slice(ndarray::s![.., self.latent_dim..]).to_owned();
        Ok((d_latent, d_action))
    }
}

/// Mean-over-batch, sum-over-dims Gaussian negative log-likelihood and its
/// gradients with respect to mean and sigma.
pub fn gaussian_nll(
    target: &Array2<f64>,
    mean: &Array2<f64>,
    sigma: &Array2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let b = target.nrows() as f64;
    let mut loss = 0.0;
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_sigma = Array2::zeros(sigma.raw_dim());
    for k in 0..target.nrows() {
        for d in 0..target.ncols() {
            let (t, m, s) = (target[[k, d]], mean[[k, d]], sigma[[k, d]]);
            let e = (t - m) / s;
            loss += (0.5 * e * e + s.ln() + 0.5 * LN_2PI) / b;
            d_mean[[k, d]] = (m - t) / (s * s) / b;
            d_sigma[[k, d]] = (1.0 / s - e * e / s) / b;
        }
    }
    (loss, d_mean, d_sigma)
}

// ---------------------------------------------------------------------------
// Pairing and losses
// ---------------------------------------------------------------------------

/// Uniformly random permutation pairing index k with perm[k].
pub fn pair_batch(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), x.ncols()), |(k, j)| x[[idx[k], j]])
}

fn gather1(x: &Array1<f64>, idx: &[usize]) -> Array1<f64> {
    Array1::from_shape_fn(idx.len(), |k| x[idx[k]])
}

#[derive(Debug, Clone)]
pub struct BisimLossOut {
    pub loss: f64,
    pub d_zi: Array2<f64>,
    pub d_zj: Array2<f64>,
}

/// Paired bisimulation loss
///   J = mean_k ( ||z_i - z_j||_1 - |r_i - r_j|
///                - discount_weight * W2(N(m_i, s_i), N(m_j, s_j)) )^2
/// with gradients only through the l1 term; the reward and dynamics inputs
/// are treated as constants (stop-gradient target).
#[allow(clippy::too_many_arguments)]
pub fn bisim_loss(
    z_i: &Array2<f64>,
    z_j: &Array2<f64>,
    r_i: &Array1<f64>,
    r_j: &Array1<f64>,
    mean_i: &Array2<f64>,
    sigma_i: &Array2<f64>,
    mean_j: &Array2<f64>,
    sigma_j: &Array2<f64>,
    discount_weight: f64,
) -> Result<BisimLossOut> {
    let (b, kdim) = z_i.dim();
    if z_j.dim() != (b, kdim) || r_i.len() != b || r_j.len() != b {
        return Err(Error::DimensionMismatch("bisim_loss batch shapes disagree".into()));
    }
    if mean_i.dim() != mean_j.dim() || sigma_i.dim() != sigma_j.dim() {
        return Err(Error::DimensionMismatch("bisim_loss gaussian shapes disagree".into()));
    }
    let mut loss = 0.0;
    let mut d_zi = Array2::zeros((b, kdim));
    let mut d_zj = Array2::zeros((b, kdim));
    for k in 0..b {
        let mut l1 = 0.0;
        for d in 0..kdim {
            l1 += (z_i[[k, d]] - z_j[[k, d]]).abs();
        }
        let mut w2_sq = 0.0;
        for d in 0..mean_i.ncols() {
            let dm = mean_i[[k, d]] - mean_j[[k, d]];
            let ds = sigma_i[[k, d]] - sigma_j[[k, d]];
            w2_sq += dm * dm + ds * ds;
        }
        let target = (r_i[k] - r_j[k]).abs() + discount_weight * w2_sq.sqrt();
        let e = l1 - target;
        if !e.is_finite() {
            return Err(Error::NonFinite("bisim loss residual".into()));
        }
        loss += e * e / b as f64;
        let up = 2.0 * e / b as f64;
        for d in 0..kdim {
            let s = (z_i[[k, d]] - z_j[[k, d]]).signum();
            let s = if z_i[[k, d]] == z_j[[k, d]] { 0.0 } else { s };
            d_zi[[k, d]] = up * s;
            d_zj[[k, d]] = -up * s;
        }
    }
    Ok(BisimLossOut { loss, d_zi, d_zj })
}

// ---------------------------------------------------------------------------
// Baseline losses
// ---------------------------------------------------------------------------

/// Learned distance head psi over latent pairs, with a Polyak target copy.
#[derive(Debug, Clone)]
pub struct DistanceNetwork {
    pub net: Mlp,
    pub target: Mlp,
}

impl DistanceNetwork {
    pub fn new(latent_dim: usize, hidden_width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let spec = MlpSpec::new(vec![2 * latent_dim, hidden_width, 1], Activation::Softplus)?;
        let net = Mlp::init(spec, rng);
        let target = net.clone();
        Ok(Self { net, target })
    }

    pub fn sync_target(&mut self, tau: f64) -> Result<()> {
        polyak_update(&mut self.target, &self.net, tau)
    }
}

fn concat_pairs(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    Array2::from_shape_fn((n, 2 * k), |(r, c)| if c < k { a[[r, c]] } else { b[[r, c - k]] })
}

#[derive(Debug, Clone)]
pub struct CastroLossOut {
    pub loss: f64,
    pub d_zi: Array2<f64>,
    pub d_zj: Array2<f64>,
}

/// Distance-network TD loss on sampled transitions
///   J = mean_k ( psi(z_i, z_j) - |r_i - r_j|
///                - gamma * psi_target(z'_i, z'_j) )^2.
/// Accumulates gradients into psi's parameters and returns the gradients
/// with respect to the online latents; next-step latents come from target
/// networks and are constants.
pub fn castro_loss(
    dist: &mut DistanceNetwork,
    z_i: &Array2<f64>,
    z_j: &Array2<f64>,
    r_i: &Array1<f64>,
    r_j: &Array1<f64>,
    next_zt_i: &Array2<f64>,
    next_zt_j: &Array2<f64>,
    gamma: f64,
) -> Result<CastroLossOut> {
    let b = z_i.nrows();
    let kdim = z_i.ncols();
    let online = dist.net.forward(&concat_pairs(z_i, z_j))?;
    let target_out = dist.target.forward(&concat_pairs(next_zt_i, next_zt_j))?;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros((b, 1));
    for k in 0..b {
        let e = online.output[[k, 0]] - (r_i[k] - r_j[k]).abs() - gamma * target_out.output[[k, 0]];
        if !e.is_finite() {
            return Err(Error::NonFinite("castro loss residual".into()));
        }
        loss += e * e / b as f64;
        upstream[[k, 0]] = 2.0 * e / b as f64;
    }
    let din = dist.net.backward(&online, &upstream)?;
    let d_zi = din.slice(ndarray::s![.., ..kdim]).to_owned();
    let d_zj = din.slice(ndarray::s![.., kdim..]).to_owned();
    Ok(CastroLossOut { loss, d_zi, d_zj })
}

/// Autoencoder baseline: mean over batch and dims of the squared
/// reconstruction error. Accumulates decoder parameter gradients and
/// returns dL/dz.
pub fn reconstruction_loss(
    decoder: &mut Mlp,
    latents: &Array2<f64>,
    obs: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let cache = decoder.forward(latents)?;
    if cache.output.dim() != obs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "decoder output {:?} vs observations {:?}",
            cache.output.dim(),
            obs.dim()
        )));
    }
    let (b, k) = obs.dim();
    let scale = 1.0 / (b * k) as f64;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros((b, k));
    for r in 0..b {
        for c in 0..k {
            let e = cache.output[[r, c]] - obs[[r, c]];
            loss += e * e * scale;
            upstream[[r, c]] = 2.0 * e * scale;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("reconstruction loss".into()));
    }
    let d_z = decoder.backward(&cache, &upstream)?;
    Ok((loss, d_z))
}

// ---------------------------------------------------------------------------
// Agent composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbcHyper {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub distance_hidden: usize,
    pub encoder_lr: f64,
    pub model_lr: f64,
    /// Polyak rate for the encoder (and distance-network) targets
    pub tau_phi: f64,
    /// coefficient on the W2 term of the bisimulation loss (gamma by
    /// default; set to c for theory-aligned runs)
    pub discount_weight: f64,
    /// literal squared-error dynamics training with sigma pinned to 1
    pub mse_dynamics: bool,
    /// bounded (tanh) encoder output; keeps the latent scale pinned on
    /// small sparse-reward tasks
    pub encoder_tanh: bool,
}

impl Default for DbcHyper {
    fn default() -> Self {
        Self {
            latent_dim: 50,
            encoder_hidden: vec![200, 200],
            model_hidden: vec![200, 200],
            distance_hidden: 729,
            encoder_lr: 1e-5,
            model_lr: 1e-5,
            tau_phi: 0.005,
            discount_weight: 0.99,
            mse_dynamics: false,
            encoder_tanh: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
    pub encoder_loss: f64,
    pub dyn_loss: f64,
    pub rew_loss: f64,
}

/// Full agent: encoder + latent models + SAC, plus the baseline heads the
/// chosen algorithm needs.
pub struct DbcAgent {
    pub algorithm: Algorithm,
    pub encoder: Encoder,
    pub dynamics: DynamicsModel,
    pub reward: Mlp,
    pub sac: SacAgent,
    pub distance: Option<DistanceNetwork>,
    pub decoder: Option<Mlp>,
    pub hyper: DbcHyper,
    enc_opt: MlpOptimizer,
    dyn_opt: MlpOptimizer,
    rew_opt: MlpOptimizer,
    dist_opt: Option<MlpOptimizer>,
    dec_opt: Option<MlpOptimizer>,
}

impl DbcAgent {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        algorithm: Algorithm,
        hyper: DbcHyper,
        sac_hyper: SacHyper,
        sac_hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out_act = if hyper.encoder_tanh { Activation::Tanh } else { Activation::Identity };
        let encoder = Encoder::with_activation(obs_dim, &hyper.encoder_hidden, hyper.latent_dim, out_act, rng)?;
        let dynamics = DynamicsModel::new(
            hyper.latent_dim,
            &hyper.model_hidden,
            action_dim,
            hyper.mse_dynamics,
            rng,
        )?;
        let mut rew_widths = vec![hyper.latent_dim];
        rew_widths.extend_from_slice(&hyper.model_hidden);
        rew_widths.push(1);
        let reward = Mlp::init(MlpSpec::new(rew_widths, Activation::Identity)?, rng);
        let sac = SacAgent::new(hyper.latent_dim, action_dim, sac_hidden, sac_hyper, rng)?;
        let distance = if algorithm == Algorithm::Castro {
            Some(DistanceNetwork::new(hyper.latent_dim, hyper.distance_hidden, rng)?)
        } else {
            None
        };
        let decoder = if algorithm == Algorithm::Reconstruction {
            // mirror of the encoder widths
            let mut widths = vec![hyper.latent_dim];
            widths.extend(hyper.encoder_hidden.iter().rev());
            widths.push(obs_dim);
            Some(Mlp::init(MlpSpec::new(widths, Activation::Identity)?, rng))
        } else {
            None
        };
        let enc_opt = MlpOptimizer::new(&encoder.net, hyper.encoder_lr);
        let dyn_opt = MlpOptimizer::new(&dynamics.net, hyper.model_lr);
        let rew_opt = MlpOptimizer::new(&reward, hyper.model_lr);
        let dist_opt = distance.as_ref().map(|d| MlpOptimizer::new(&d.net, hyper.encoder_lr));
        let dec_opt = decoder.as_ref().map(|d| MlpOptimizer::new(d, hyper.encoder_lr));
        Ok(Self {
            algorithm,
            encoder,
            dynamics,
            reward,
            sac,
            distance,
            decoder,
            hyper,
            enc_opt,
            dyn_opt,
            rew_opt,
            dist_opt,
            dec_opt,
        })
    }

    /// Rescale every optimizer's learning rate relative to its configured
    /// base value (used for learning-rate schedules).
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.enc_opt.adam.lr = self.hyper.encoder_lr * scale;
        self.dyn_opt.adam.lr = self.hyper.model_lr * scale;
        self.rew_opt.adam.lr = self.hyper.model_lr * scale;
        if let Some(o) = self.dist_opt.as_mut() {
            o.adam.lr = self.hyper.encoder_lr * scale;
        }
        if let Some(o) = self.dec_opt.as_mut() {
            o.adam.lr = self.hyper.encoder_lr * scale;
        }
        self.sac.set_lr_scale(scale);
    }

    /// Encoder update from the bisimulation loss: reward, dynamics, and the
    /// policy mean are evaluated on detached latents (constants), the l1
    /// term on the live encoder output.
    pub fn encoder_bisim_step(&mut self, obs: &Array2<f64>, perm: &[usize]) -> Result<f64> {
        self.encoder.net.zero_grad();
        let cache = self.encoder.encode(obs)?;
        let z = &cache.output;
        // target branch on stopped gradients
        let actor_cache = self.sac.actor.forward(z)?;
        let a_bar = self.sac.actor.mean_action(&actor_cache);
        let dyn_cache = self.dynamics.forward(z, &a_bar)?;
        let r_hat = self.reward.forward(z)?.output.column(0).to_owned();

        let z_j = gather_rows(z, perm);
        let out = bisim_loss(
            z,
            &z_j,
            &r_hat,
            &gather1(&r_hat, perm),
            &dyn_cache.mean,
            &dyn_cache.sigma,
            &gather_rows(&dyn_cache.mean, perm),
            &gather_rows(&dyn_cache.sigma, perm),
            self.hyper.discount_weight,
        )?;
        let mut d_z = out.d_zi;
        for (k, &p) in perm.iter().enumerate() {
            for d in 0..d_z.ncols() {
                d_z[[p, d]] += out.d_zj[[k, d]];
            }
        }
        self.encoder.net.backward(&cache, &d_z)?;
        self.enc_opt.step(&mut self.encoder.net);
        Ok(out.loss)
    }

    /// Distance-network baseline step: trains psi and the encoder together.
    pub fn encoder_castro_step(&mut self, batch: &Batch, perm: &[usize]) -> Result<f64> {
        let dist = self.distance.as_mut().expect("castro algorithm carries psi");
        self.encoder.net.zero_grad();
        dist.net.zero_grad();
        let cache = self.encoder.encode(&batch.obs)?;
        let z = &cache.output;
        let next_zt = self.encoder.encode_target(&batch.next_obs)?;
        let out = castro_loss(
            dist,
            z,
            &gather_rows(z, perm),
            &batch.rewards,
            &gather1(&batch.rewards, perm),
            &next_zt,
            &gather_rows(&next_zt, perm),
            self.sac.hyper.gamma,
        )?;
        let mut d_z = out.d_zi;
        for (k, &p) in perm.iter().enumerate() {
            for d in 0..d_z.ncols() {
                d_z[[p, d]] += out.d_zj[[k, d]];
            }
        }
        self.encoder.net.backward(&cache, &d_z)?;
        self.enc_opt.step(&mut self.encoder.net);
        self.dist_opt.as_mut().unwrap().step(&mut dist.net);
        Ok(out.loss)
    }

    /// Autoencoder baseline step: trains decoder and encoder together.
    pub fn encoder_reconstruction_step(&mut self, obs: &Array2<f64>) -> Result<f64> {
        let decoder = self.decoder.as_mut().expect("reconstruction algorithm carries a decoder");
        self.encoder.net.zero_grad();
        decoder.zero_grad();
        let cache = self.encoder.encode(obs)?;
        let (loss, d_z) = reconstruction_loss(decoder, &cache.output, obs)?;
        self.encoder.net.backward(&cache, &d_z)?;
        self.enc_opt.step(&mut self.encoder.net);
        self.dec_opt.as_mut().unwrap().step(decoder);
        Ok(loss)
    }

    /// Dynamics and reward model training. The dynamics loss is a Gaussian
    /// NLL of the target-encoded next latent (squared error if
    /// `mse_dynamics`); the reward loss evaluates the reward head on the
    /// predicted mean next latent. Gradients from both flow into the
    /// encoder; each net takes one Adam step.
    pub fn model_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        self.encoder.net.zero_grad();
        self.dynamics.net.zero_grad();
        self.reward.zero_grad();

        let cache = self.encoder.encode(&batch.obs)?;
        let target_next = self.encoder.encode_target(&batch.next_obs)?;
        let dyn_cache = self.dynamics.forward(&cache.output, &batch.actions)?;

        let (dyn_loss, mut d_mean, d_sigma) = if self.hyper.mse_dynamics {
            let b = batch.obs.nrows() as f64;
            let mut loss = 0.0;
            let mut d_mean = Array2::zeros(dyn_cache.mean.raw_dim());
            for k in 0..dyn_cache.mean.nrows() {
                for d in 0..dyn_cache.mean.ncols() {
                    let e = dyn_cache.mean[[k, d]] - target_next[[k, d]];
                    loss += e * e / b;
                    d_mean[[k, d]] = 2.0 * e / b;
                }
            }
            (loss, d_mean, Array2::zeros(dyn_cache.sigma.raw_dim()))
        } else {
            let (loss, d_mean, d_sigma) = gaussian_nll(&target_next, &dyn_cache.mean, &dyn_cache.sigma);
            (loss, d_mean, d_sigma)
        };
        if !dyn_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "dynamics loss (batch of {})",
                batch.obs.nrows()
            )));
        }

        // reward head on the predicted mean next latent
        let rew_cache = self.reward.forward(&dyn_cache.mean)?;
        let b = batch.obs.nrows() as f64;
        let mut rew_loss = 0.0;
        let mut rew_up = Array2::zeros((batch.obs.nrows(), 1));
        for k in 0..batch.obs.nrows() {
            let e = rew_cache.output[[k, 0]] - batch.rewards[k];
            rew_loss += e * e / b;
            rew_up[[k, 0]] = 2.0 * e / b;
        }
        if !rew_loss.is_finite() {
            return Err(Error::NonFinite("reward loss".into()));
        }
        let d_mean_rew = self.reward.backward(&rew_cache, &rew_up)?;
        d_mean += &d_mean_rew;

        let (d_z, _) = self.dynamics.backward(&dyn_cache, &d_mean, &d_sigma)?;
        self.encoder.net.backward(&cache, &d_z)?;
        self.dyn_opt.step(&mut self.dynamics.net);
        self.rew_opt.step(&mut self.reward);
        self.enc_opt.step(&mut self.encoder.net);
        Ok((dyn_loss, rew_loss))
    }

    /// One full update on a replay batch: pair the batch, run the SAC policy
    /// update (critic gradients flow into the encoder), then the encoder
    /// loss of the configured algorithm, then the latent models.
    pub fn update(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<UpdateMetrics> {
        let perm = pair_batch(batch.obs.nrows(), rng);

        // policy update with encoder gradients from the critic loss
        self.encoder.net.zero_grad();
        let cache = self.encoder.encode(&batch.obs)?;
        let next_latents = self.encoder.encode_target(&batch.next_obs)?;
        let latent_batch = LatentBatch {
            latents: cache.output.clone(),
            actions: batch.actions.clone(),
            rewards: batch.rewards.clone(),
            next_latents,
            dones: batch.dones.clone(),
        };
        let (sac_report, d_z): (SacReport, Array2<f64>) = self.sac.update(&latent_batch, rng)?;
        self.encoder.net.backward(&cache, &d_z)?;
        self.enc_opt.step(&mut self.encoder.net);
        if sac_report.actor_loss.is_some() {
            // target sync cadence follows the critic targets
            self.encoder.sync_target(self.hyper.tau_phi)?;
            if let Some(dist) = self.distance.as_mut() {
                dist.sync_target(self.hyper.tau_phi)?;
            }
        }

        let encoder_loss = match self.algorithm {
            Algorithm::Dbc => self.encoder_bisim_step(&batch.obs, &perm)?,
            Algorithm::Castro => self.encoder_castro_step(batch, &perm)?,
            Algorithm::Reconstruction => self.encoder_reconstruction_step(&batch.obs)?,
            Algorithm::SacRaw => 0.0,
        };

        let (dyn_loss, rew_loss) = match self.algorithm {
            Algorithm::Dbc => self.model_step(batch)?,
            _ => (0.0, 0.0),
        };

        Ok(UpdateMetrics {
            critic_loss: sac_report.critic_loss,
            actor_loss: sac_report.actor_loss,
            alpha: sac_report.alpha,
            encoder_loss,
            dyn_loss,
            rew_loss,
        })
    }
}
