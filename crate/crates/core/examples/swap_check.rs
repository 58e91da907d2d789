//! Quick distractor-swap robustness scan; not part of the test suite.
//!
//! Trains a DBC and a reconstruction source on reach-goal and measures the
//! return drop when the evaluation-time distractor process is swapped, for
//! several swap strengths.

use std::time::Instant;

use bisimkit::config::{EnvSpec, ExperimentConfig};
use bisimkit::dbc::{Algorithm, DbcAgent};
use bisimkit::envs::{Env, PointMassVariant};
use bisimkit::harness::{build_env, evaluate, training_run_public, BuiltEnv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pm_cfg(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = EnvSpec::PointMass {
        n_distractor: 32,
        episode_cap: 100,
        structure_seed: 0,
        lambda_a: 0.01,
        variant: PointMassVariant::ReachGoal,
    };
    let t = &mut cfg.train;
    t.total_steps = steps;
    t.init_steps = 2000;
    t.critic_lr = 1e-3;
    t.actor_lr = 1e-3;
    t.encoder_lr = 1e-3;
    t.model_lr = 1e-3;
    t.alpha_lr = 1e-3;
    t.buffer_capacity = 100_000;
    t.batch_size = 64;
    t.latent_dim = 12;
    t.encoder_hidden = vec![64];
    t.model_hidden = vec![64];
    t.sac_hidden = vec![128, 128];
    t.distance_hidden = 64;
    t.mse_dynamics = true;
    t.encoder_tanh = false;
    t.tau_phi = 0.05;
    t.eval_every = steps;
    t.eval_episodes = 20;
    cfg
}

fn pm_env(cfg: &ExperimentConfig) -> BuiltEnv {
    match build_env(&cfg.env) {
        BuiltEnv::PointMass(e) => BuiltEnv::PointMass(e.with_variant(PointMassVariant::ReachGoal)),
        _ => unreachable!(),
    }
}

fn train_source(cfg: &ExperimentConfig, algo: Algorithm, seed: u64) -> DbcAgent {
    let mut env = pm_env(cfg);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = DbcAgent::new(
        env.obs_dim(),
        env.action_dim(),
        algo,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut r,
    )
    .unwrap();
    training_run_public(&mut agent, &mut env, cfg, seed, cfg.train.total_steps).unwrap();
    agent
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let tanh = args.get(3).map(|s| s == "tanh").unwrap_or(false);
    let mut cfg = pm_cfg(steps);
    cfg.train.encoder_tanh = tanh;
    let shifts = [(0.5, 0.9), (0.0, 0.9), (0.5, 1.2), (0.9, 0.9), (0.99, 0.9)];
    for seed in 0..n_seeds {
        let t0 = Instant::now();
        let dbc = train_source(&cfg, Algorithm::Dbc, seed);
        let rec = train_source(&cfg, Algorithm::Reconstruction, seed);
        let eval_seed = seed ^ 0x5aa5;
        let mut orig = pm_env(&cfg);
        let d0 = evaluate(&dbc, &mut orig, 20, eval_seed).unwrap();
        let r0 = evaluate(&rec, &mut orig, 20, eval_seed).unwrap();
        print!("seed={seed} dbc0={d0:.2} rec0={r0:.2}");
        for (rho, sigma) in shifts {
            let mut sw = pm_env(&cfg);
            if let BuiltEnv::PointMass(e) = &mut sw {
                e.set_distractor_params(rho, sigma);
            }
            let d1 = evaluate(&dbc, &mut sw, 20, eval_seed).unwrap();
            let mut sw2 = pm_env(&cfg);
            if let BuiltEnv::PointMass(e) = &mut sw2 {
                e.set_distractor_params(rho, sigma);
            }
            let r1 = evaluate(&rec, &mut sw2, 20, eval_seed).unwrap();
            print!(" [{rho}/{sigma}] d_drop={:.2} r_drop={:.2}", d0 - d1, r0 - r1);
        }
        println!(" elapsed={:.0}s", t0.elapsed().as_secs_f64());
    }
}
