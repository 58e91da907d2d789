//! Experiment orchestration: the `exact`, `train`, `eval-corr`, `eval-inv`,
//! and `eval-transfer` subcommands. Every command is a pure function of
//! (config, seed) to output bytes.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bisim::{
    bisim_metric_max, bisim_metric_onpolicy, bisimulation_partition, check_lipschitz,
    check_value_bound, epsilon_aggregate, learning_error, metric_to_csv, partition_to_csv,
    LatentNorm, LipschitzReport, ValueBoundReport,
};
use crate::config::{EnvSpec, ExperimentConfig, TransferVariant};
use crate::dbc::{Algorithm, DbcAgent, DbcHyper};
use crate::envs::{
    bin_action, ContinuousPointMass, Env, FactoredCausalMdp, PointMassVariant,
    TabularDistractorGrid,
};
use crate::mdp::{greedy_policy, value_iteration, DiscretePolicy, FiniteMdp};
use crate::nn::MlpCheckpoint;
use crate::sac::{ReplayBuffer, Transition};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Environment construction
// ---------------------------------------------------------------------------

pub enum BuiltEnv {
    Grid(TabularDistractorGrid),
    Factored(FactoredCausalMdp),
    PointMass(ContinuousPointMass),
}

pub fn build_env(spec: &EnvSpec) -> BuiltEnv {
    match *spec {
        EnvSpec::Grid { side, n_distractor, episode_cap, structure_seed } => {
            BuiltEnv::Grid(TabularDistractorGrid::new(side, n_distractor, episode_cap, structure_seed))
        }
        EnvSpec::Factored { d1, d2, d3, n_actions, episode_cap, structure_seed } => {
            BuiltEnv::Factored(FactoredCausalMdp::new(d1, d2, d3, n_actions, episode_cap, structure_seed))
        }
        EnvSpec::PointMass { n_distractor, episode_cap, structure_seed, lambda_a, variant } => {
            let mut env = ContinuousPointMass::new(n_distractor, episode_cap, structure_seed);
            env.lambda_a = lambda_a;
            BuiltEnv::PointMass(env.with_variant(variant))
        }
    }
}

impl Env for BuiltEnv {
    fn obs_dim(&self) -> usize {
        match self {
            BuiltEnv::Grid(e) => e.obs_dim(),
            BuiltEnv::Factored(e) => e.obs_dim(),
            BuiltEnv::PointMass(e) => e.obs_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            BuiltEnv::Grid(e) => e.action_dim(),
            BuiltEnv::Factored(e) => e.action_dim(),
            BuiltEnv::PointMass(e) => e.action_dim(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            BuiltEnv::Grid(e) => e.reset(seed),
            BuiltEnv::Factored(e) => e.reset(seed),
            BuiltEnv::PointMass(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<crate::envs::StepResult> {
        match self {
            BuiltEnv::Grid(e) => e.step(action),
            BuiltEnv::Factored(e) => e.step(action),
            BuiltEnv::PointMass(e) => e.step(action),
        }
    }
}

impl BuiltEnv {
    pub fn is_tabular(&self) -> bool {
        !matches!(self, BuiltEnv::PointMass(_))
    }

    pub fn to_finite_mdp(&self, gamma: f64) -> Result<FiniteMdp> {
        match self {
            BuiltEnv::Grid(e) => e.to_finite_mdp(gamma),
            BuiltEnv::Factored(e) => e.to_finite_mdp(gamma),
            BuiltEnv::PointMass(_) => Err(Error::Config(
                "this operation requires a tabular environment; point_mass has no finite MDP".into(),
            )),
        }
    }

    pub fn n_discrete_actions(&self) -> Option<usize> {
        match self {
            BuiltEnv::Grid(_) => Some(4),
            BuiltEnv::Factored(e) => Some(e.n_actions),
            BuiltEnv::PointMass(_) => None,
        }
    }

    /// Observation of every product state, for tabular envs.
    pub fn enumerate_observations(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            BuiltEnv::Grid(e) => {
                Some((0..e.n_product_states()).map(|s| e.observation_of_state(s)).collect())
            }
            BuiltEnv::Factored(e) => {
                Some((0..e.n_product_states()).map(|s| e.observation_of_state(s)).collect())
            }
            BuiltEnv::PointMass(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hyper: DbcHyper,
    pub sac_hyper: crate::sac::SacHyper,
    pub sac_hidden: Vec<usize>,
    pub encoder: MlpCheckpoint,
    pub encoder_target: MlpCheckpoint,
    pub dynamics: MlpCheckpoint,
    pub reward: MlpCheckpoint,
    pub actor: MlpCheckpoint,
    pub q1: MlpCheckpoint,
    pub q2: MlpCheckpoint,
    pub q1_target: MlpCheckpoint,
    pub q2_target: MlpCheckpoint,
    pub log_alpha: f64,
    pub distance: Option<MlpCheckpoint>,
    pub distance_target: Option<MlpCheckpoint>,
    pub decoder: Option<MlpCheckpoint>,
}

pub fn checkpoint_agent(
    agent: &DbcAgent,
    obs_dim: usize,
    action_dim: usize,
    sac_hidden: &[usize],
) -> AgentCheckpoint {
    AgentCheckpoint {
        schema_version: SCHEMA_VERSION,
        algorithm: agent.algorithm,
        obs_dim,
        action_dim,
        hyper: agent.hyper.clone(),
        sac_hyper: agent.sac.hyper.clone(),
        sac_hidden: sac_hidden.to_vec(),
        encoder: MlpCheckpoint::of(&agent.encoder.net),
        encoder_target: MlpCheckpoint::of(&agent.encoder.target),
        dynamics: MlpCheckpoint::of(&agent.dynamics.net),
        reward: MlpCheckpoint::of(&agent.reward),
        actor: MlpCheckpoint::of(&agent.sac.actor.net),
        q1: MlpCheckpoint::of(&agent.sac.q1.net),
        q2: MlpCheckpoint::of(&agent.sac.q2.net),
        q1_target: MlpCheckpoint::of(&agent.sac.q1_target.net),
        q2_target: MlpCheckpoint::of(&agent.sac.q2_target.net),
        log_alpha: agent.sac.log_alpha,
        distance: agent.distance.as_ref().map(|d| MlpCheckpoint::of(&d.net)),
        distance_target: agent.distance.as_ref().map(|d| MlpCheckpoint::of(&d.target)),
        decoder: agent.decoder.as_ref().map(MlpCheckpoint::of),
    }
}

/// Rebuild an agent from a checkpoint. Optimizer moments are not part of the
/// checkpoint format; they restart fresh.
pub fn restore_agent(ckpt: &AgentCheckpoint) -> Result<DbcAgent> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = DbcAgent::new(
        ckpt.obs_dim,
        ckpt.action_dim,
        ckpt.algorithm,
        ckpt.hyper.clone(),
        ckpt.sac_hyper.clone(),
        &ckpt.sac_hidden,
        &mut rng,
    )?;
    agent.encoder.net = ckpt.encoder.restore()?;
    agent.encoder.target = ckpt.encoder_target.restore()?;
    agent.dynamics.net = ckpt.dynamics.restore()?;
    agent.reward = ckpt.reward.restore()?;
    agent.sac.actor.net = ckpt.actor.restore()?;
    agent.sac.q1.net = ckpt.q1.restore()?;
    agent.sac.q2.net = ckpt.q2.restore()?;
    agent.sac.q1_target.net = ckpt.q1_target.restore()?;
    agent.sac.q2_target.net = ckpt.q2_target.restore()?;
    agent.sac.log_alpha = ckpt.log_alpha;
    if let (Some(d), Some(dt), Some(dist)) =
        (&ckpt.distance, &ckpt.distance_target, agent.distance.as_mut())
    {
        dist.net = d.restore()?;
        dist.target = dt.restore()?;
    }
    if let (Some(d), Some(dec)) = (&ckpt.decoder, agent.decoder.as_mut()) {
        *dec = d.restore()?;
    }
    Ok(agent)
}

pub fn save_checkpoint(path: &Path, ckpt: &AgentCheckpoint) -> Result<()> {
    let mut text = serde_json::to_string_pretty(ckpt)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AgentCheckpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ckpt: AgentCheckpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid checkpoint: {e}")))?;
    if ckpt.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "checkpoint schema version {} unsupported (expected {SCHEMA_VERSION})",
            ckpt.schema_version
        )));
    }
    Ok(ckpt)
}

fn require_checkpoint(cfg: &ExperimentConfig) -> Result<AgentCheckpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this subcommand needs a `checkpoint` path in the config".into()))?;
    load_checkpoint(path)
}

// ---------------------------------------------------------------------------
// Statistics helpers
// ---------------------------------------------------------------------------

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Ranks with ties assigned their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

// ---------------------------------------------------------------------------
// exact
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct BoundsReport {
    pub schema_version: u32,
    pub n_states: usize,
    pub c: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub n_blocks: usize,
    pub value_bound: ValueBoundReport,
    /// absent when c < gamma (the bound's premise fails)
    pub lipschitz: Option<LipschitzReport>,
}

pub fn cmd_exact(cfg: &ExperimentConfig, _seed: u64, out: &Path) -> Result<()> {
    let env = build_env(&cfg.env);
    let m = &cfg.metric;
    let mdp = env.to_finite_mdp(m.gamma)?;

    let metric_max = bisim_metric_max(&mdp, m.c, m.tol)?;
    let v = value_iteration(&mdp, m.tol)?;
    let pi = greedy_policy(&mdp, &v)?;
    let metric_pi = bisim_metric_onpolicy(&mdp, &pi, m.c, m.tol)?;
    let partition = bisimulation_partition(&mdp, 1e-9);
    let agg = epsilon_aggregate(&mdp, &metric_max, m.epsilon)?;
    let value_bound = check_value_bound(&mdp, &agg, m.epsilon, m.c, m.tol)?;
    let lipschitz = if m.c >= m.gamma {
        Some(check_lipschitz(&mdp, &metric_max, m.c, m.tol)?)
    } else {
        None
    };

    let report = BoundsReport {
        schema_version: SCHEMA_VERSION,
        n_states: mdp.n_states,
        c: m.c,
        gamma: m.gamma,
        epsilon: m.epsilon,
        n_blocks: partition.n_blocks,
        value_bound,
        lipschitz,
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metric.csv"), metric_to_csv(&metric_max))?;
    std::fs::write(out.join("metric_onpolicy.csv"), metric_to_csv(&metric_pi))?;
    std::fs::write(out.join("partition.csv"), partition_to_csv(&partition))?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out.join("bounds.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn encode_single(agent: &DbcAgent, obs: &[f64]) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec())
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok(agent.encoder.encode_values(&x)?.row(0).to_vec())
}

/// Deterministic-policy evaluation episodes; returns the mean return.
pub fn evaluate(agent: &DbcAgent, env: &mut BuiltEnv, episodes: usize, seed_base: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut obs = env.reset(seed_base.wrapping_add(ep as u64));
        loop {
            let z = encode_single(agent, &obs)?;
            let a = agent.sac.act(&z, true, &mut rng)?;
            let r = env.step(&a)?;
            total += r.reward;
            obs = r.obs;
            if r.done || r.truncated {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

struct TrainLogs {
    train_csv: String,
    latents_csv: String,
    eval_csv: String,
}

fn latent_header(latent_dim: usize) -> String {
    let mut h = String::from("episode,step,obs_id");
    for d in 0..latent_dim {
        h.push_str(&format!(",z_{d}"));
    }
    h.push('\n');
    h
}

fn dump_latents(
    logs: &mut TrainLogs,
    agent: &DbcAgent,
    env: &BuiltEnv,
    episode: usize,
    step: usize,
) -> Result<()> {
    if let Some(observations) = env.enumerate_observations() {
        for (s, obs) in observations.iter().enumerate() {
            let z = encode_single(agent, obs)?;
            logs.latents_csv.push_str(&format!("{episode},{step},{s}"));
            for v in z {
                logs.latents_csv.push_str(&format!(",{v}"));
            }
            logs.latents_csv.push('\n');
        }
    }
    Ok(())
}

/// The interaction/update loop shared by `train` and `eval-transfer`.
/// Returns the final deterministic evaluation return.
fn training_run(
    agent: &mut DbcAgent,
    env: &mut BuiltEnv,
    cfg: &ExperimentConfig,
    seed: u64,
    total_steps: usize,
    mut logs: Option<&mut TrainLogs>,
    mut probe: Option<(usize, &mut dyn FnMut(usize, &DbcAgent) -> Result<()>)>,
) -> Result<f64> {
    let t_cfg = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replay = ReplayBuffer::new(t_cfg.buffer_capacity);
    let action_dim = env.action_dim();

    let mut obs = env.reset(rng.random());
    let mut episode = 0usize;
    let mut ep_return = 0.0;
    let mut last_return = 0.0;
    let mut last = crate::dbc::UpdateMetrics {
        critic_loss: 0.0,
        actor_loss: None,
        alpha: agent.sac.alpha(),
        encoder_loss: 0.0,
        dyn_loss: 0.0,
        rew_loss: 0.0,
    };
    let mut final_eval = 0.0;

    for step in 1..=total_steps {
        let action: Vec<f64> = if step <= t_cfg.init_steps {
            (0..action_dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
        } else {
            let z = encode_single(agent, &obs)?;
            agent.sac.act(&z, false, &mut rng)?
        };
        let r = env.step(&action)?;
        ep_return += r.reward;
        replay.push(Transition {
            obs: obs.clone(),
            action: action.clone(),
            reward: r.reward,
            next_obs: r.obs.clone(),
            done: r.done,
        });
        obs = r.obs;
        if r.done || r.truncated {
            episode += 1;
            last_return = ep_return;
            ep_return = 0.0;
            obs = env.reset(rng.random());
        }

        if step > t_cfg.init_steps && replay.len() >= t_cfg.batch_size {
            if t_cfg.lr_final_scale < 1.0 {
                let frac = step as f64 / total_steps as f64;
                agent.set_lr_scale(t_cfg.lr_final_scale.powf(frac));
            }
            let batch = replay.sample(t_cfg.batch_size, &mut rng)?;
            last = agent.update(&batch, &mut rng).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at env step {step}")),
                other => other,
            })?;
        }

        if let Some(logs) = logs.as_deref_mut() {
            if step % t_cfg.log_every == 0 {
                logs.train_csv.push_str(&format!(
                    "{step},{episode},{last_return},{},{},{},{},{},{}\n",
                    last.critic_loss,
                    last.actor_loss.unwrap_or(f64::NAN),
                    last.alpha,
                    last.encoder_loss,
                    last.dyn_loss,
                    last.rew_loss,
                ));
            }
        }
        if let Some((every, f)) = probe.as_mut() {
            if *every > 0 && step % *every == 0 {
                f(step, agent)?;
            }
        }
        if step % t_cfg.eval_every == 0 || step == total_steps {
            let mean = evaluate(agent, env, t_cfg.eval_episodes, seed ^ 0x5eed_0000 ^ step as u64)?;
            final_eval = mean;
            if let Some(logs) = logs.as_deref_mut() {
                logs.eval_csv.push_str(&format!("{step},{mean}\n"));
                dump_latents(logs, agent, env, episode, step)?;
            }
            // the evaluation consumed the env; resume from a fresh episode
            obs = env.reset(rng.random());
            ep_return = 0.0;
        }
    }
    Ok(final_eval)
}

/// Run the training loop without writing logs; returns the final
/// deterministic evaluation return.
pub fn training_run_public(
    agent: &mut DbcAgent,
    env: &mut BuiltEnv,
    cfg: &ExperimentConfig,
    seed: u64,
    total_steps: usize,
) -> Result<f64> {
    training_run(agent, env, cfg, seed, total_steps, None, None)
}

/// Run the training loop without logs, invoking `probe(step, agent)` every
/// `probe_every` environment steps; returns the final evaluation return.
pub fn training_run_probed(
    agent: &mut DbcAgent,
    env: &mut BuiltEnv,
    cfg: &ExperimentConfig,
    seed: u64,
    total_steps: usize,
    probe_every: usize,
    probe: &mut dyn FnMut(usize, &DbcAgent) -> Result<()>,
) -> Result<f64> {
    training_run(agent, env, cfg, seed, total_steps, None, Some((probe_every, probe)))
}

pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let mut env = build_env(&cfg.env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = DbcAgent::new(
        env.obs_dim(),
        env.action_dim(),
        cfg.algorithm,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut rng,
    )?;

    let mut logs = TrainLogs {
        train_csv: String::from(
            "step,episode,return,critic_loss,actor_loss,alpha,encoder_loss,dyn_loss,rew_loss\n",
        ),
        latents_csv: latent_header(cfg.train.latent_dim),
        eval_csv: String::from("step,mean_return\n"),
    };

    training_run(&mut agent, &mut env, cfg, seed, cfg.train.total_steps, Some(&mut logs), None)?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("train.csv"), &logs.train_csv)?;
    std::fs::write(out.join("latents.csv"), &logs.latents_csv)?;
    std::fs::write(out.join("eval.csv"), &logs.eval_csv)?;
    let ckpt = checkpoint_agent(&agent, env.obs_dim(), env.action_dim(), &cfg.train.sac_hidden);
    save_checkpoint(&out.join("checkpoint.json"), &ckpt)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-corr
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct CorrelationReport {
    pub schema_version: u32,
    pub n_states: usize,
    pub c: f64,
    pub pearson_onpolicy: f64,
    pub spearman_onpolicy: f64,
    pub pearson_max: f64,
    pub spearman_max: f64,
    /// against the on-policy metric of the greedy optimal policy (the fixed
    /// point the agent's own on-policy metric approaches as it improves)
    pub pearson_pistar: f64,
    pub spearman_pistar: f64,
    pub learning_error: f64,
}

/// Project the trained actor to a deterministic tabular policy by binning
/// its mean action for each enumerated observation.
pub fn tabular_policy_projection(
    agent: &DbcAgent,
    env: &BuiltEnv,
    mdp: &FiniteMdp,
) -> Result<DiscretePolicy> {
    let observations = env
        .enumerate_observations()
        .ok_or_else(|| Error::Config("policy projection requires a tabular environment".into()))?;
    let n_actions = env.n_discrete_actions().expect("tabular env has discrete actions");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut actions = Vec::with_capacity(observations.len());
    for obs in &observations {
        let z = encode_single(agent, obs)?;
        let a = agent.sac.act(&z, true, &mut rng)?;
        actions.push(bin_action(a[0], n_actions));
    }
    debug_assert_eq!(actions.len(), mdp.n_states);
    Ok(DiscretePolicy::deterministic(&actions, mdp.n_actions))
}

pub fn eval_correlation_report(cfg: &ExperimentConfig, agent: &DbcAgent) -> Result<CorrelationReport> {
    let env = build_env(&cfg.env);
    let m = &cfg.metric;
    let mdp = env.to_finite_mdp(m.gamma)?;
    let observations = env.enumerate_observations().expect("tabular env");
    let latents: Vec<Vec<f64>> = observations
        .iter()
        .map(|o| encode_single(agent, o))
        .collect::<Result<_>>()?;

    let policy = tabular_policy_projection(agent, &env, &mdp)?;
    let metric_pi = bisim_metric_onpolicy(&mdp, &policy, m.c, m.tol)?;
    let metric_max = bisim_metric_max(&mdp, m.c, m.tol)?;
    let v = value_iteration(&mdp, m.tol)?;
    let pistar = greedy_policy(&mdp, &v)?;
    let metric_pistar = bisim_metric_onpolicy(&mdp, &pistar, m.c, m.tol)?;

    let n = mdp.n_states;
    let mut dz = Vec::with_capacity(n * (n - 1) / 2);
    let mut d_pi = Vec::with_capacity(dz.capacity());
    let mut d_max = Vec::with_capacity(dz.capacity());
    let mut d_star = Vec::with_capacity(dz.capacity());
    for i in 0..n {
        for j in (i + 1)..n {
            let l1: f64 = latents[i]
                .iter()
                .zip(&latents[j])
                .map(|(a, b)| (a - b).abs())
                .sum();
            dz.push(l1);
            d_pi.push(metric_pi.dist[[i, j]]);
            d_max.push(metric_max.dist[[i, j]]);
            d_star.push(metric_pistar.dist[[i, j]]);
        }
    }

    Ok(CorrelationReport {
        schema_version: SCHEMA_VERSION,
        n_states: n,
        c: m.c,
        pearson_onpolicy: pearson(&dz, &d_pi),
        spearman_onpolicy: spearman(&dz, &d_pi),
        pearson_max: pearson(&dz, &d_max),
        spearman_max: spearman(&dz, &d_max),
        pearson_pistar: pearson(&dz, &d_star),
        spearman_pistar: spearman(&dz, &d_star),
        learning_error: learning_error(&latents, &metric_pi, LatentNorm::L1)?,
    })
}

pub fn cmd_eval_correlation(cfg: &ExperimentConfig, _seed: u64, out: &Path) -> Result<()> {
    let ckpt = require_checkpoint(cfg)?;
    let agent = restore_agent(&ckpt)?;
    let report = eval_correlation_report(cfg, &agent)?;
    std::fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out.join("correlation.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-inv
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct InvarianceReport {
    pub schema_version: u32,
    pub distractor_dist_mean: f64,
    pub task_dist_mean: f64,
    pub ratio: f64,
    pub n_pairs_distractor: usize,
    pub n_pairs_task: usize,
}

fn mean_latent_l1(agent: &DbcAgent, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in pairs {
        let za = encode_single(agent, a)?;
        let zb = encode_single(agent, b)?;
        total += za.iter().zip(&zb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

/// Observation pairs differing only in the distractor factor vs. only in the
/// task factor.
pub fn invariance_pairs(
    env: &BuiltEnv,
    seed: u64,
) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut distractor = Vec::new();
    let mut task = Vec::new();
    match env {
        BuiltEnv::Grid(e) => {
            for cell in 0..e.n_cells() {
                for d1 in 0..e.n_distractor {
                    for d2 in (d1 + 1)..e.n_distractor {
                        distractor.push((e.observation_of(cell, d1), e.observation_of(cell, d2)));
                    }
                }
            }
            for d in 0..e.n_distractor {
                for c1 in 0..e.n_cells() {
                    for c2 in (c1 + 1)..e.n_cells() {
                        task.push((e.observation_of(c1, d), e.observation_of(c2, d)));
                    }
                }
            }
        }
        BuiltEnv::Factored(e) => {
            for s1 in 0..e.d1 {
                for s2 in 0..e.d2 {
                    for a in 0..e.d3 {
                        for b in (a + 1)..e.d3 {
                            distractor.push((e.observation_of(s1, s2, a), e.observation_of(s1, s2, b)));
                        }
                    }
                }
            }
            for s2 in 0..e.d2 {
                for s3 in 0..e.d3 {
                    for a in 0..e.d1 {
                        for b in (a + 1)..e.d1 {
                            task.push((e.observation_of(a, s2, s3), e.observation_of(b, s2, s3)));
                        }
                    }
                }
            }
        }
        BuiltEnv::PointMass(e) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rand_rel = |rng: &mut ChaCha8Rng| -> [f64; 4] {
                [
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ]
            };
            let rand_dis = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..e.n_distractor).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
            };
            for _ in 0..200 {
                let rel = rand_rel(&mut rng);
                let (da, db) = (rand_dis(&mut rng), rand_dis(&mut rng));
                distractor.push((e.observation_of_parts(&rel, &da), e.observation_of_parts(&rel, &db)));
                let d = rand_dis(&mut rng);
                let (ra, rb) = (rand_rel(&mut rng), rand_rel(&mut rng));
                task.push((e.observation_of_parts(&ra, &d), e.observation_of_parts(&rb, &d)));
            }
        }
    }
    Ok((distractor, task))
}

pub fn eval_invariance_report(
    cfg: &ExperimentConfig,
    agent: &DbcAgent,
    seed: u64,
) -> Result<InvarianceReport> {
    let env = build_env(&cfg.env);
    let (distractor, task) = invariance_pairs(&env, seed)?;
    let distractor_dist_mean = mean_latent_l1(agent, &distractor)?;
    let task_dist_mean = mean_latent_l1(agent, &task)?;
    Ok(InvarianceReport {
        schema_version: SCHEMA_VERSION,
        distractor_dist_mean,
        task_dist_mean,
        ratio: distractor_dist_mean / task_dist_mean,
        n_pairs_distractor: distractor.len(),
        n_pairs_task: task.len(),
    })
}

pub fn cmd_eval_invariance(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let ckpt = require_checkpoint(cfg)?;
    let agent = restore_agent(&ckpt)?;
    let report = eval_invariance_report(cfg, &agent, seed)?;
    std::fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out.join("invariance.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct TransferReport {
    pub schema_version: u32,
    pub variant: TransferVariant,
    pub ancestor_premise_holds: bool,
    pub frozen_final_return: f64,
    pub scratch_final_return: f64,
    pub ratio: f64,
    pub swap_frozen_return: Option<f64>,
    pub swap_frozen_drop: Option<f64>,
}

fn variant_env(cfg: &ExperimentConfig) -> Result<(BuiltEnv, bool)> {
    let base = build_env(&cfg.env);
    match cfg.transfer.variant {
        TransferVariant::Original => Ok((base, true)),
        TransferVariant::HoldVelocity => match base {
            BuiltEnv::PointMass(e) => Ok((
                BuiltEnv::PointMass(e.with_variant(PointMassVariant::HoldVelocity)),
                true,
            )),
            _ => Err(Error::Config("hold_velocity variant needs the point_mass env".into())),
        },
        TransferVariant::S3Reward => match base {
            BuiltEnv::Factored(e) => Ok((BuiltEnv::Factored(e.with_s3_reward()), false)),
            _ => Err(Error::Config("s3_reward variant needs the factored env".into())),
        },
    }
}

pub fn cmd_eval_transfer(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let ckpt = require_checkpoint(cfg)?;
    let (mut env, premise_holds) = variant_env(cfg)?;
    if !premise_holds {
        eprintln!(
            "warning: transfer variant places reward on a non-ancestor factor; \
             the encoder-sufficiency premise fails and results are diagnostic only"
        );
    }

    // frozen: source encoder, fresh SAC, encoder learning rate pinned to 0
    let mut frozen_hyper = ckpt.hyper.clone();
    frozen_hyper.encoder_lr = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frozen = DbcAgent::new(
        ckpt.obs_dim,
        ckpt.action_dim,
        Algorithm::SacRaw,
        frozen_hyper,
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut rng,
    )?;
    frozen.encoder.net = ckpt.encoder.restore()?;
    frozen.encoder.target = ckpt.encoder.restore()?;

    let mut frozen_logs = empty_logs(cfg);
    let frozen_final = training_run(
        &mut frozen,
        &mut env,
        cfg,
        seed,
        cfg.transfer.steps,
        Some(&mut frozen_logs),
        None,
    )?;

    // scratch: everything fresh at the same budget
    let (mut env2, _) = variant_env(cfg)?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
    let mut scratch = DbcAgent::new(
        ckpt.obs_dim,
        ckpt.action_dim,
        Algorithm::SacRaw,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut rng2,
    )?;
    let mut scratch_logs = empty_logs(cfg);
    let scratch_final = training_run(
        &mut scratch,
        &mut env2,
        cfg,
        seed,
        cfg.transfer.steps,
        Some(&mut scratch_logs),
        None,
    )?;

    // optional distractor-distribution swap at evaluation time
    let (swap_frozen_return, swap_frozen_drop) = if let Some((rho, sigma)) = cfg.transfer.swap_distractor {
        let (mut swap_env, _) = variant_env(cfg)?;
        match &mut swap_env {
            BuiltEnv::PointMass(e) => e.set_distractor_params(rho, sigma),
            _ => {
                return Err(Error::Config(
                    "distractor swap is defined for the point_mass env".into(),
                ))
            }
        }
        let ret = evaluate(&frozen, &mut swap_env, cfg.train.eval_episodes, seed ^ 0x5aa5)?;
        (Some(ret), Some(frozen_final - ret))
    } else {
        (None, None)
    };

    let report = TransferReport {
        schema_version: SCHEMA_VERSION,
        variant: cfg.transfer.variant,
        ancestor_premise_holds: premise_holds,
        frozen_final_return: frozen_final,
        scratch_final_return: scratch_final,
        ratio: frozen_final / scratch_final,
        swap_frozen_return,
        swap_frozen_drop,
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("frozen_curve.csv"), &frozen_logs.eval_csv)?;
    std::fs::write(out.join("scratch_curve.csv"), &scratch_logs.eval_csv)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out.join("transfer.json"), json)?;
    Ok(())
}

fn empty_logs(cfg: &ExperimentConfig) -> TrainLogs {
    TrainLogs {
        train_csv: String::from(
            "step,episode,return,critic_loss,actor_loss,alpha,encoder_loss,dyn_loss,rew_loss\n",
        ),
        latents_csv: latent_header(cfg.train.latent_dim),
        eval_csv: String::from("step,mean_return\n"),
    }
}
