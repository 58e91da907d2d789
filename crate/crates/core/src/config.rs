//! Experiment configuration: TOML or JSON, strictly validated, with the
//! published hyperparameter defaults (replay 10^6, batch 128, gamma 0.99,
//! critic/actor/encoder lr 1e-5, temperature lr 1e-4, tau 0.005, initial
//! alpha 0.1, update frequency 2).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dbc::{Algorithm, DbcHyper};
use crate::envs::PointMassVariant;
use crate::sac::SacHyper;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Grid {
        #[serde(default = "default_grid_side")]
        side: usize,
        #[serde(default = "default_grid_distractors")]
        n_distractor: usize,
        #[serde(default = "default_grid_cap")]
        episode_cap: usize,
        #[serde(default)]
        structure_seed: u64,
    },
    Factored {
        #[serde(default = "default_d1")]
        d1: usize,
        #[serde(default = "default_d2")]
        d2: usize,
        #[serde(default = "default_d3")]
        d3: usize,
        #[serde(default = "default_factored_actions")]
        n_actions: usize,
        #[serde(default = "default_factored_cap")]
        episode_cap: usize,
        #[serde(default)]
        structure_seed: u64,
    },
    PointMass {
        #[serde(default = "default_pm_distractors")]
        n_distractor: usize,
        #[serde(default = "default_pm_cap")]
        episode_cap: usize,
        #[serde(default)]
        structure_seed: u64,
        #[serde(default = "default_lambda_a")]
        lambda_a: f64,
        #[serde(default = "default_variant")]
        variant: PointMassVariant,
    },
}

fn default_grid_side() -> usize { 4 }
fn default_grid_distractors() -> usize { 5 }
fn default_grid_cap() -> usize { 50 }
fn default_d1() -> usize { 3 }
fn default_d2() -> usize { 2 }
fn default_d3() -> usize { 3 }
fn default_factored_actions() -> usize { 2 }
fn default_factored_cap() -> usize { 40 }
fn default_pm_distractors() -> usize { 8 }
fn default_pm_cap() -> usize { 100 }
fn default_lambda_a() -> f64 { 0.01 }
fn default_variant() -> PointMassVariant { PointMassVariant::ReachGoal }

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Grid {
            side: 4,
            n_distractor: 5,
            episode_cap: 50,
            structure_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub init_steps: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub encoder_lr: f64,
    pub model_lr: f64,
    pub alpha_lr: f64,
    pub tau_q: f64,
    pub tau_phi: f64,
    pub init_alpha: f64,
    pub update_freq: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub sac_hidden: Vec<usize>,
    pub distance_hidden: usize,
    /// coefficient on the W2 term of the bisimulation loss; defaults to
    /// gamma, may be set to c for theory-aligned runs
    pub discount_weight: Option<f64>,
    /// literal squared-error dynamics training with sigma pinned to 1
    pub mse_dynamics: bool,
    /// bounded (tanh) encoder output head
    pub encoder_tanh: bool,
    /// exponential learning-rate decay: all rates scale from 1 at step 0
    /// down to this fraction at the final step (1.0 = constant rates)
    pub lr_final_scale: f64,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 50_000,
            init_steps: 1_000,
            buffer_capacity: 1_000_000,
            batch_size: 128,
            gamma: 0.99,
            critic_lr: 1e-5,
            actor_lr: 1e-5,
            encoder_lr: 1e-5,
            model_lr: 1e-5,
            alpha_lr: 1e-4,
            tau_q: 0.005,
            tau_phi: 0.005,
            init_alpha: 0.1,
            update_freq: 2,
            latent_dim: 50,
            encoder_hidden: vec![200, 200],
            model_hidden: vec![200, 200],
            sac_hidden: vec![200, 200],
            distance_hidden: 729,
            discount_weight: None,
            mse_dynamics: false,
            encoder_tanh: false,
            lr_final_scale: 1.0,
            log_every: 100,
            eval_every: 5_000,
            eval_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// discount of the metric operator (Eq. 3)
    pub c: f64,
    /// MDP discount used by the exact-analysis subcommands
    pub gamma: f64,
    /// aggregation radius for the value-bound check
    pub epsilon: f64,
    pub tol: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            c: 0.99,
            gamma: 0.99,
            epsilon: 0.05,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    Original,
    #[default]
    HoldVelocity,
    /// factored-env variant putting reward on the isolated factor; violates
    /// the ancestor-subset premise and is reported as such
    S3Reward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub variant: TransferVariant,
    pub steps: usize,
    /// distractor chain parameters applied at evaluation time (rho, sigma)
    pub swap_distractor: Option<(f64, f64)>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            variant: TransferVariant::HoldVelocity,
            steps: 10_000,
            swap_distractor: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub algorithm: Algorithm,
    pub train: TrainConfig,
    pub metric: MetricConfig,
    pub transfer: TransferConfig,
    /// checkpoint consumed by the eval subcommands
    pub checkpoint: Option<PathBuf>,
}

impl Default for Algorithm {
    fn default() -> Self {
        Algorithm::Dbc
    }
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

fn check_rate(x: f64, name: &str) -> Result<()> {
    check(x.is_finite() && x >= 0.0, &format!("{name} must be a finite nonnegative rate"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.env {
            EnvSpec::Grid { side, n_distractor, episode_cap, .. } => {
                check(*side >= 2, "grid side must be at least 2")?;
                check(*n_distractor >= 1, "grid needs at least one distractor state")?;
                check(*episode_cap >= 1, "episode cap must be positive")?;
            }
            EnvSpec::Factored { d1, d2, d3, n_actions, episode_cap, .. } => {
                check(*d1 >= 1 && *d2 >= 1 && *d3 >= 1, "factor domains must be nonempty")?;
                check(*n_actions >= 1, "factored env needs at least one action")?;
                check(*episode_cap >= 1, "episode cap must be positive")?;
            }
            EnvSpec::PointMass { n_distractor, episode_cap, lambda_a, .. } => {
                check(*n_distractor >= 1, "point mass needs at least one distractor dim")?;
                check(*episode_cap >= 1, "episode cap must be positive")?;
                check(lambda_a.is_finite() && *lambda_a >= 0.0, "lambda_a must be finite and nonnegative")?;
            }
        }
        let t = &self.train;
        check(t.batch_size > 0, "batch size must be positive")?;
        check(t.buffer_capacity >= t.batch_size, "buffer capacity must hold a batch")?;
        check((0.0..1.0).contains(&t.gamma), "gamma must lie in [0, 1)")?;
        for (x, name) in [
            (t.critic_lr, "critic_lr"),
            (t.actor_lr, "actor_lr"),
            (t.encoder_lr, "encoder_lr"),
            (t.model_lr, "model_lr"),
            (t.alpha_lr, "alpha_lr"),
        ] {
            check_rate(x, name)?;
        }
        check((0.0..=1.0).contains(&t.tau_q) && t.tau_q > 0.0, "tau_q must lie in (0, 1]")?;
        check((0.0..=1.0).contains(&t.tau_phi) && t.tau_phi > 0.0, "tau_phi must lie in (0, 1]")?;
        check(t.init_alpha > 0.0 && t.init_alpha.is_finite(), "init_alpha must be positive")?;
        check(t.update_freq >= 1, "update_freq must be at least 1")?;
        check(t.latent_dim >= 1, "latent_dim must be positive")?;
        check(t.distance_hidden >= 1, "distance_hidden must be positive")?;
        if let Some(w) = t.discount_weight {
            check(w.is_finite() && (0.0..1.0).contains(&w), "discount_weight must lie in [0, 1)")?;
        }
        check(
            t.lr_final_scale.is_finite() && t.lr_final_scale > 0.0 && t.lr_final_scale <= 1.0,
            "lr_final_scale must lie in (0, 1]",
        )?;
        check(t.log_every >= 1, "log_every must be positive")?;
        check(t.eval_every >= 1, "eval_every must be positive")?;
        check(t.eval_episodes >= 1, "eval_episodes must be positive")?;
        let m = &self.metric;
        check((0.0..1.0).contains(&m.c) && m.c > 0.0, "metric c must lie in (0, 1)")?;
        check((0.0..1.0).contains(&m.gamma), "metric gamma must lie in [0, 1)")?;
        check(m.epsilon > 0.0 && m.epsilon.is_finite(), "epsilon must be positive")?;
        check(m.tol > 0.0 && m.tol.is_finite(), "metric tol must be positive")?;
        check(self.transfer.steps >= 1, "transfer steps must be positive")?;
        if let Some((rho, sigma)) = self.transfer.swap_distractor {
            check(rho.is_finite() && rho.abs() < 1.0, "swap rho must lie in (-1, 1)")?;
            check(sigma.is_finite() && sigma > 0.0, "swap sigma must be positive")?;
        }
        Ok(())
    }

    /// Parse from TOML (by extension) or JSON, then validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
        let cfg: ExperimentConfig = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid TOML config: {e}")))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sac_hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.train.gamma,
            tau: self.train.tau_q,
            actor_lr: self.train.actor_lr,
            critic_lr: self.train.critic_lr,
            alpha_lr: self.train.alpha_lr,
            init_alpha: self.train.init_alpha,
            update_freq: self.train.update_freq,
        }
    }

    pub fn dbc_hyper(&self) -> DbcHyper {
        DbcHyper {
            latent_dim: self.train.latent_dim,
            encoder_hidden: self.train.encoder_hidden.clone(),
            model_hidden: self.train.model_hidden.clone(),
            distance_hidden: self.train.distance_hidden,
            encoder_lr: self.train.encoder_lr,
            model_lr: self.train.model_lr,
            tau_phi: self.train.tau_phi,
            discount_weight: self.train.discount_weight.unwrap_or(self.train.gamma),
            mse_dynamics: self.train.mse_dynamics,
            encoder_tanh: self.train.encoder_tanh,
        }
    }
}
