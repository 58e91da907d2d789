//! Quick point-mass transfer sanity check; not part of the test suite.

use std::time::Instant;

use ndarray::Array2;

use bisimkit::config::{EnvSpec, ExperimentConfig};
use bisimkit::dbc::{Algorithm, DbcAgent};
use bisimkit::envs::{Env, PointMassVariant};
use bisimkit::harness::{build_env, evaluate, training_run_public, BuiltEnv};
use rand::Rng;
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
    t.init_steps = 500;
    t.buffer_capacity = 100_000;
    t.batch_size = 64;
    t.critic_lr = 1e-3;
    t.actor_lr = 1e-3;
    t.encoder_lr = 1e-3;
    t.model_lr = 1e-3;
    t.alpha_lr = 1e-3;
    t.latent_dim = 6;
    t.encoder_hidden = vec![64];
    t.model_hidden = vec![64];
    t.sac_hidden = vec![64];
    t.distance_hidden = 64;
    t.mse_dynamics = true;
    t.encoder_tanh = true;
    t.tau_phi = 0.05;
    t.eval_every = steps;
    t.eval_episodes = 20;
    cfg
}

fn pm_env(cfg: &ExperimentConfig, variant: PointMassVariant) -> BuiltEnv {
    match build_env(&cfg.env) {
        BuiltEnv::PointMass(e) => BuiltEnv::PointMass(e.with_variant(variant)),
        _ => unreachable!(),
    }
}

fn random_return(env: &mut BuiltEnv, episodes: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ep in 0..episodes {
        env.reset(seed.wrapping_add(ep as u64));
        loop {
            let a: Vec<f64> = (0..env.action_dim()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
            let s = env.step(&a).unwrap();
            total += s.reward;
            if s.done || s.truncated {
                break;
            }
        }
    }
    total / episodes as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let src_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(steps);
    let latent: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(6);
    let src_init: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(500);
    let tanh: bool = args.get(6).map(|s| s != "notanh").unwrap_or(true);
    let xfer_lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    for seed in 0..n_seeds {
        let t0 = Instant::now();
        let mut cfg = pm_cfg(steps);
        cfg.train.latent_dim = latent;
        cfg.train.encoder_tanh = tanh;
        let mut src_cfg = cfg.clone();
        src_cfg.train.sac_hidden = vec![128, 128];
        cfg.train.sac_hidden = vec![128, 128];
        cfg.train.critic_lr = xfer_lr;
        cfg.train.actor_lr = xfer_lr;
        cfg.train.alpha_lr = xfer_lr;
        cfg.train.encoder_lr = xfer_lr;
        src_cfg.train.total_steps = src_steps;
        src_cfg.train.eval_every = src_steps;
        src_cfg.train.init_steps = src_init;

        // source task: reach-goal with a DBC encoder
        let mut env = pm_env(&cfg, PointMassVariant::ReachGoal);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut src = DbcAgent::new(
            env.obs_dim(), env.action_dim(), Algorithm::Dbc,
            src_cfg.dbc_hyper(), src_cfg.sac_hyper(), &src_cfg.train.sac_hidden, &mut r,
        ).unwrap();
        let src_final = training_run_public(&mut src, &mut env, &src_cfg, seed, src_steps).unwrap();
        let mut env_rand = pm_env(&cfg, PointMassVariant::ReachGoal);
        let reach_floor = random_return(&mut env_rand, 20, seed ^ 0x0f0f);

        // frozen encoder on hold-velocity
        let mut cfg_f = cfg.clone();
        cfg_f.train.encoder_lr = 0.0;
        let mut hv = pm_env(&cfg, PointMassVariant::HoldVelocity);
        let mut rf = ChaCha8Rng::seed_from_u64(seed);
        let mut frozen = DbcAgent::new(
            hv.obs_dim(), hv.action_dim(), Algorithm::SacRaw,
            cfg_f.dbc_hyper(), cfg_f.sac_hyper(), &cfg_f.train.sac_hidden, &mut rf,
        ).unwrap();
        frozen.encoder.net = src.encoder.net.clone();
        // Standardize latent features over target-task observations so the
        // fresh critic/actor see inputs at a uniform scale (valid because the
        // encoder output activation is linear).
        if !tanh {
            let mut probe = pm_env(&cfg, PointMassVariant::HoldVelocity);
            let mut pr = ChaCha8Rng::seed_from_u64(seed ^ 0x77aa);
            let mut obs_rows: Vec<f64> = Vec::new();
            let mut n_rows = 0usize;
            let mut o = probe.reset(seed ^ 0x77aa);
            for _ in 0..2000 {
                obs_rows.extend_from_slice(&o);
                n_rows += 1;
                let a: Vec<f64> = (0..probe.action_dim())
                    .map(|_| pr.random_range(-1.0..1.0))
                    .collect();
                let tr = probe.step(&a).unwrap();
                o = if tr.truncated || tr.done {
                    probe.reset(seed ^ 0x77aa ^ n_rows as u64)
                } else {
                    tr.obs
                };
            }
            let obs = Array2::from_shape_vec((n_rows, frozen.encoder.net.spec.input_dim()), obs_rows).unwrap();
            let z = frozen.encoder.encode_values(&obs).unwrap();
            let mean = z.mean_axis(ndarray::Axis(0)).unwrap();
            let stds: Vec<f64> = (0..z.ncols())
                .map(|j| {
                    let col = z.column(j);
                    (col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n_rows as f64).sqrt()
                })
                .collect();
            let scale: Vec<f64> = stds.iter().map(|s| 1.0 / s.max(1e-4)).collect();
            frozen.encoder.net.standardize_output(mean.as_slice().unwrap(), &scale);
        }
        frozen.encoder.target = frozen.encoder.net.clone();
        let frozen_final = training_run_public(&mut frozen, &mut hv, &cfg_f, seed, steps).unwrap();

        // from scratch on hold-velocity
        let mut hv2 = pm_env(&cfg, PointMassVariant::HoldVelocity);
        let mut rs = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
        let mut scratch = DbcAgent::new(
            hv2.obs_dim(), hv2.action_dim(), Algorithm::SacRaw,
            cfg.dbc_hyper(), cfg.sac_hyper(), &cfg.train.sac_hidden, &mut rs,
        ).unwrap();
        let scratch_final = training_run_public(&mut scratch, &mut hv2, &cfg, seed, steps).unwrap();

        let mut hv3 = pm_env(&cfg, PointMassVariant::HoldVelocity);
        let hv_floor = random_return(&mut hv3, 20, seed ^ 0x0f0f);

        // distractor swap on the source task
        let mut orig = pm_env(&cfg, PointMassVariant::ReachGoal);
        let mut swap = pm_env(&cfg, PointMassVariant::ReachGoal);
        if let BuiltEnv::PointMass(e) = &mut swap {
            e.set_distractor_params(0.5, 0.9);
        }
        let s_orig = evaluate(&src, &mut orig, 20, seed ^ 0x5aa5).unwrap();
        let s_swap = evaluate(&src, &mut swap, 20, seed ^ 0x5aa5).unwrap();

        let norm = (frozen_final - hv_floor) / (scratch_final - hv_floor);
        println!(
            "seed={seed} src={src_final:.2} (floor {reach_floor:.2}) frozen={frozen_final:.2} \
             scratch={scratch_final:.2} hv_floor={hv_floor:.2} norm_ratio={norm:.3} \
             swap_drop={:.3} elapsed={:.0}s",
            s_orig - s_swap,
            t0.elapsed().as_secs_f64()
        );
    }
}
