//! Desk-scale hyperparameter calibration for the grid correlation target.
//! Not part of the test suite; run with `cargo run --release --example calibrate`.

use std::time::Instant;

use bisimkit::config::{EnvSpec, ExperimentConfig, MetricConfig};
use bisimkit::dbc::{Algorithm, DbcAgent};
use bisimkit::envs::Env;
use bisimkit::harness::{build_env, eval_correlation_report, eval_invariance_report};
use bisimkit::sac::{ReplayBuffer, Transition};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_cfg(steps: usize, lr: f64, latent: usize, hidden: &[usize], batch: usize, c: f64, mse: bool, tanh: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = EnvSpec::Grid {
        side: 4,
        n_distractor: 5,
        episode_cap: 50,
        structure_seed: 0,
    };
    cfg.metric = MetricConfig {
        c,
        gamma: 0.99,
        epsilon: 0.05,
        tol: 1e-9,
    };
    cfg.train.total_steps = steps;
    cfg.train.init_steps = 500;
    cfg.train.buffer_capacity = 100_000;
    cfg.train.batch_size = batch;
    cfg.train.critic_lr = lr;
    cfg.train.actor_lr = lr;
    cfg.train.encoder_lr = lr;
    cfg.train.model_lr = lr;
    cfg.train.alpha_lr = lr;
    cfg.train.latent_dim = latent;
    cfg.train.encoder_hidden = hidden.to_vec();
    cfg.train.model_hidden = hidden.to_vec();
    cfg.train.sac_hidden = hidden.to_vec();
    cfg.train.distance_hidden = hidden[0];
    cfg.train.eval_every = steps.max(1);
    cfg.train.discount_weight = Some(c);
    cfg.train.mse_dynamics = mse;
    cfg.train.encoder_tanh = tanh;
    cfg.train.tau_phi = 0.05;
    cfg.train.eval_episodes = 1;
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let algo = match args.get(1).map(|s| s.as_str()) {
        Some("castro") => Algorithm::Castro,
        Some("recon") => Algorithm::Reconstruction,
        _ => Algorithm::Dbc,
    };
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let latent: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let hidden: Vec<usize> = args
        .get(5)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![32]);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(32);
    let n_seeds: u64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(5);
    let c: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let mse: bool = args.get(9).map(|s| s == "mse").unwrap_or(false);
    let tanh: bool = args.get(10).map(|s| s == "tanh").unwrap_or(false);
    let enc_lr: Option<f64> = args.get(11).and_then(|s| s.parse().ok());
    let sac_lr: Option<f64> = args.get(12).and_then(|s| s.parse().ok());
    let lr_final: f64 = args.get(13).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let init_steps: usize = args.get(14).and_then(|s| s.parse().ok()).unwrap_or(500);
    let tau_phi: f64 = args.get(15).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let seed_start: u64 = args.get(16).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut cfg = grid_cfg(steps, lr, latent, &hidden, batch, c, mse, tanh);
    if let Some(e) = enc_lr {
        cfg.train.encoder_lr = e;
    }
    cfg.train.init_steps = init_steps;
    cfg.train.tau_phi = tau_phi;
    if let Some(e) = sac_lr {
        cfg.train.critic_lr = e;
        cfg.train.actor_lr = e;
        cfg.train.alpha_lr = e;
    }
    for seed in seed_start..seed_start + n_seeds {
        let t0 = Instant::now();
        let mut env = build_env(&cfg.env);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agent = DbcAgent::new(
            env.obs_dim(),
            env.action_dim(),
            algo,
            cfg.dbc_hyper(),
            cfg.sac_hyper(),
            &cfg.train.sac_hidden,
            &mut rng,
        )
        .unwrap();
        // custom loop with periodic correlation probes
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let mut replay = ReplayBuffer::new(cfg.train.buffer_capacity);
        let mut obs = env.reset(rng2.random());
        for step in 1..=steps {
            let action: Vec<f64> = if step <= cfg.train.init_steps {
                vec![rng2.random::<f64>() * 2.0 - 1.0]
            } else {
                let x = Array2::from_shape_vec((1, obs.len()), obs.clone()).unwrap();
                let z = agent.encoder.encode_values(&x).unwrap().row(0).to_vec();
                agent.sac.act(&z, false, &mut rng2).unwrap()
            };
            let r = env.step(&action).unwrap();
            replay.push(Transition {
                obs: obs.clone(),
                action,
                reward: r.reward,
                next_obs: r.obs.clone(),
                done: r.done,
            });
            obs = r.obs;
            if r.done || r.truncated {
                obs = env.reset(rng2.random());
            }
            if step > cfg.train.init_steps && replay.len() >= cfg.train.batch_size {
                if lr_final < 1.0 {
                    let frac = step as f64 / steps as f64;
                    agent.set_lr_scale(lr_final.powf(frac));
                }
                let batch = replay.sample(cfg.train.batch_size, &mut rng2).unwrap();
                agent.update(&batch, &mut rng2).unwrap();
            }
            if step % 5000 == 0 {
                let mut ecfg = cfg.clone();
                ecfg.metric.c = 0.5;
                let corr = eval_correlation_report(&ecfg, &agent).unwrap();
                println!("  seed={seed} step={step} p0.5={:.4} pstar={:.4} pmax={:.4}", corr.pearson_onpolicy, corr.pearson_pistar, corr.pearson_max);
            }
        }
        let inv = eval_invariance_report(&cfg, &agent, seed).unwrap();
        let mut parts = String::new();
        for eval_c in [0.3, 0.5, 0.7, 0.9] {
            let mut ecfg = cfg.clone();
            ecfg.metric.c = eval_c;
            let corr = eval_correlation_report(&ecfg, &agent).unwrap();
            parts.push_str(&format!(
                " p{eval_c}={:.4}/star{:.4}/max{:.4}",
                corr.pearson_onpolicy, corr.pearson_pistar, corr.pearson_max
            ));
        }
        println!(
            "algo={algo:?} seed={seed}{parts} inv_ratio={:.4} elapsed={:.1}s",
            inv.ratio,
            t0.elapsed().as_secs_f64()
        );
    }
}
