//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`; a FAIL also fails the test).

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bisimkit::bisim::{
    bisim_metric_max, check_lipschitz, check_value_bound, epsilon_aggregate, PseudoMetric,
};
use bisimkit::dbc::{
    bisim_loss, castro_loss, gaussian_nll, pair_batch, reconstruction_loss, Algorithm, DbcAgent,
    DbcHyper, DistanceNetwork, DynamicsModel,
};
use bisimkit::envs::{FactoredCausalMdp, TabularDistractorGrid};
use bisimkit::mdp::{random_mdp, FiniteMdp};
use bisimkit::nn::{finite_diff_relative_error, Activation, Mlp, MlpSpec};
use bisimkit::ot::{brute_force_w1, w1_discrete, DiscreteDistribution};
use bisimkit::sac::{standard_normal, Actor, Critic, SacHyper};

fn criterion<F: FnOnce() -> Result<(), String>>(name: &str, f: F) {
    match f() {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(e) => {
            println!("ACCEPTANCE {name}: FAIL ({e})");
            panic!("acceptance criterion {name} failed: {e}");
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random MDP population shared by the value-bound suites: 200 MDPs with
/// 2..=20 states and 1..=4 actions.
fn mdp_population(discount: f64) -> Vec<FiniteMdp> {
    let mut r = rng(4242);
    (0..200)
        .map(|k| {
            let n = r.random_range(2..=20usize);
            let a = r.random_range(1..=4usize);
            random_mdp(n, a, discount, 10_000 + k)
        })
        .collect()
}

#[test]
fn c01_closed_form_metric() {
    criterion("closed-form two-state metric", || {
        let t0 = Instant::now();
        // two absorbing self-loop states, rewards 1 and 0
        let mut transition = ndarray::Array3::zeros((1, 2, 2));
        transition[[0, 0, 0]] = 1.0;
        transition[[0, 1, 1]] = 1.0;
        let mut reward = Array2::zeros((2, 1));
        reward[[0, 0]] = 1.0;
        let mdp = FiniteMdp::new(transition, reward, 0.9).map_err(|e| e.to_string())?;
        for c in [0.5, 0.9, 0.99] {
            let m = bisim_metric_max(&mdp, c, 1e-12).map_err(|e| e.to_string())?;
            let d = m.dist[[0, 1]];
            if (d - 1.0).abs() > 1e-6 {
                return Err(format!("c={c}: d={d}, expected 1.0 +- 1e-6"));
            }
        }
        if t0.elapsed().as_secs_f64() >= 1.0 {
            return Err(format!("took {:.2}s, budget 1s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c02_ot_oracle_equivalence() {
    criterion("transport solver vs brute-force oracle", || {
        let t0 = Instant::now();
        let mut r = rng(7);
        for case in 0..500 {
            let m = r.random_range(1..=4usize);
            let n = r.random_range(1..=4usize);
            let draw = |r: &mut ChaCha8Rng, k: usize| {
                let raw: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                DiscreteDistribution::new(raw.iter().map(|x| x / s).collect()).unwrap()
            };
            let p = draw(&mut r, m);
            let q = draw(&mut r, n);
            let cost = Array2::from_shape_fn((m, n), |_| r.random::<f64>());
            let fast = w1_discrete(&p, &q, &cost).map_err(|e| e.to_string())?.value;
            let slow = brute_force_w1(&p, &q, &cost).map_err(|e| e.to_string())?;
            if (fast - slow).abs() > 1e-8 {
                return Err(format!("case {case}: simplex {fast} vs oracle {slow}"));
            }
        }
        if t0.elapsed().as_secs_f64() >= 10.0 {
            return Err(format!("took {:.2}s, budget 10s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c03_value_function_lipschitz_suite() {
    criterion("value Lipschitz bound on 200 random MDPs", || {
        let t0 = Instant::now();
        let c = 0.9;
        for (k, mdp) in mdp_population(0.9).iter().enumerate() {
            let metric = bisim_metric_max(mdp, c, 1e-9).map_err(|e| e.to_string())?;
            let report = check_lipschitz(mdp, &metric, c, 1e-6).map_err(|e| e.to_string())?;
            if !report.holds {
                return Err(format!(
                    "mdp {k} ({} states): |dV| exceeded d/(1-c), max ratio {}",
                    mdp.n_states, report.max_ratio
                ));
            }
        }
        if t0.elapsed().as_secs_f64() >= 300.0 {
            return Err(format!("took {:.1}s, budget 300s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c04_aggregation_value_bound_suite() {
    criterion("aggregated value bound on 200 random MDPs", || {
        let t0 = Instant::now();
        let c = 0.9;
        let mut r = rng(99);
        for (k, mdp) in mdp_population(0.9).iter().enumerate() {
            let metric = bisim_metric_max(mdp, c, 1e-9).map_err(|e| e.to_string())?;
            for eps in [0.01, 0.05, 0.1] {
                let agg = epsilon_aggregate(mdp, &metric, eps).map_err(|e| e.to_string())?;
                let report =
                    check_value_bound(mdp, &agg, eps, c, 1e-6).map_err(|e| e.to_string())?;
                if !report.holds {
                    return Err(format!(
                        "mdp {k}, eps {eps}: gap {} > bound {}",
                        report.max_gap, report.bound
                    ));
                }
            }

            // extended bound: cluster by a perturbed metric with injected
            // error L, then |V - Vbar| <= (2 eps + 2 L) / ((1-gamma)(1-c))
            let eps = 0.05;
            let n = mdp.n_states;
            let mut perturbed = metric.dist.clone();
            let mut injected: f64 = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let noise = (r.random::<f64>() - 0.5) * 0.1; // |noise| <= 0.05
                    let v = (metric.dist[[i, j]] + noise).max(0.0);
                    injected = injected.max((v - metric.dist[[i, j]]).abs());
                    perturbed[[i, j]] = v;
                    perturbed[[j, i]] = v;
                }
            }
            let perturbed = PseudoMetric { dist: perturbed };
            let agg = epsilon_aggregate(mdp, &perturbed, eps).map_err(|e| e.to_string())?;
            let report = check_value_bound(mdp, &agg, eps, c, 1e-6).map_err(|e| e.to_string())?;
            let extended = (2.0 * eps + 2.0 * injected) / ((1.0 - mdp.discount) * (1.0 - c));
            if report.max_gap > extended + 1e-6 {
                return Err(format!(
                    "mdp {k}: extended bound violated, gap {} > {} (L = {injected})",
                    report.max_gap, extended
                ));
            }
        }
        if t0.elapsed().as_secs_f64() >= 600.0 {
            return Err(format!("took {:.1}s, budget 600s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c05_non_ancestor_factor_exactness() {
    criterion("zero metric across non-ancestor factors", || {
        let t0 = Instant::now();

        let fac = FactoredCausalMdp::new(3, 2, 3, 2, 40, 0);
        let mdp = fac.to_finite_mdp(0.9).map_err(|e| e.to_string())?;
        let metric = bisim_metric_max(&mdp, 0.9, 1e-10).map_err(|e| e.to_string())?;
        for s1 in 0..fac.d1 {
            for s2 in 0..fac.d2 {
                for a in 0..fac.d3 {
                    for b in (a + 1)..fac.d3 {
                        let i = fac.product_index(s1, s2, a);
                        let j = fac.product_index(s1, s2, b);
                        if metric.dist[[i, j]] >= 1e-6 {
                            return Err(format!(
                                "factored ({s1},{s2}): d over s3 pair = {}",
                                metric.dist[[i, j]]
                            ));
                        }
                    }
                }
            }
        }

        let grid = TabularDistractorGrid::new(4, 5, 50, 0);
        let mdp = grid.to_finite_mdp(0.9).map_err(|e| e.to_string())?;
        let metric = bisim_metric_max(&mdp, 0.9, 1e-10).map_err(|e| e.to_string())?;
        for cell in 0..grid.n_cells() {
            for a in 0..grid.n_distractor {
                for b in (a + 1)..grid.n_distractor {
                    let i = grid.product_index(cell, a);
                    let j = grid.product_index(cell, b);
                    if metric.dist[[i, j]] >= 1e-6 {
                        return Err(format!(
                            "grid cell {cell}: d over distractor pair = {}",
                            metric.dist[[i, j]]
                        ));
                    }
                }
            }
        }

        if t0.elapsed().as_secs_f64() >= 120.0 {
            return Err(format!("took {:.1}s, budget 120s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c06_gradient_integrity() {
    criterion("finite-difference checks for every loss", || {
        let t0 = Instant::now();
        let tol = 1e-4;
        for seed in 0..20u64 {
            let mut r = rng(1000 + seed);
            let b = 4;
            let kdim = 3;

            // bisimulation encoder loss: analytic gradient on both latents
            {
                let z_i = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let z_j = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let r_i = Array1::from_shape_fn(b, |_| standard_normal(&mut r));
                let r_j = Array1::from_shape_fn(b, |_| standard_normal(&mut r));
                let m_i = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let m_j = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let s_i = Array2::from_shape_fn((b, kdim), |_| 0.5 + r.random::<f64>());
                let s_j = Array2::from_shape_fn((b, kdim), |_| 0.5 + r.random::<f64>());
                let out = bisim_loss(&z_i, &z_j, &r_i, &r_j, &m_i, &s_i, &m_j, &s_j, 0.99)
                    .map_err(|e| e.to_string())?;
                let mut params: Vec<f64> = z_i.iter().copied().collect();
                params.extend(z_j.iter());
                let mut analytic: Vec<f64> = out.d_zi.iter().copied().collect();
                analytic.extend(out.d_zj.iter());
                let nz = b * kdim;
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let zi = Array2::from_shape_vec((b, kdim), p[..nz].to_vec()).unwrap();
                    let zj = Array2::from_shape_vec((b, kdim), p[nz..].to_vec()).unwrap();
                    bisim_loss(&zi, &zj, &r_i, &r_j, &m_i, &s_i, &m_j, &s_j, 0.99)
                        .unwrap()
                        .loss
                });
                if err > tol {
                    return Err(format!("seed {seed}: bisim loss rel err {err}"));
                }
            }

            // distance-network encoder loss: psi parameters and latents
            {
                let mut dist = DistanceNetwork::new(kdim, 8, &mut r).unwrap();
                let z_i = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let z_j = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let r_i = Array1::from_shape_fn(b, |_| standard_normal(&mut r));
                let r_j = Array1::from_shape_fn(b, |_| standard_normal(&mut r));
                let nt_i = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let nt_j = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                dist.net.zero_grad();
                let out = castro_loss(&mut dist, &z_i, &z_j, &r_i, &r_j, &nt_i, &nt_j, 0.99)
                    .map_err(|e| e.to_string())?;
                let mut params = dist.net.flatten_params();
                let n_psi = params.len();
                params.extend(z_i.iter());
                params.extend(z_j.iter());
                let mut analytic = dist.net.flatten_grads();
                analytic.extend(out.d_zi.iter());
                analytic.extend(out.d_zj.iter());
                let nz = b * kdim;
                let dist_ref = &dist;
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let mut d2 = DistanceNetwork::new(kdim, 8, &mut rng(0)).unwrap();
                    d2.net.set_params(&p[..n_psi]);
                    d2.target = dist_ref.target.clone();
                    let zi =
                        Array2::from_shape_vec((b, kdim), p[n_psi..n_psi + nz].to_vec()).unwrap();
                    let zj = Array2::from_shape_vec((b, kdim), p[n_psi + nz..].to_vec()).unwrap();
                    castro_loss(&mut d2, &zi, &zj, &r_i, &r_j, &nt_i, &nt_j, 0.99)
                        .unwrap()
                        .loss
                });
                if err > tol {
                    return Err(format!("seed {seed}: distance-net loss rel err {err}"));
                }
            }

            // reconstruction loss: decoder parameters and latents
            {
                let spec = MlpSpec::new(vec![kdim, 6, 5], Activation::Identity).unwrap();
                let mut decoder = Mlp::init(spec.clone(), &mut r);
                let latents = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let obs = Array2::from_shape_fn((b, 5), |_| standard_normal(&mut r));
                decoder.zero_grad();
                let (_, d_z) =
                    reconstruction_loss(&mut decoder, &latents, &obs).map_err(|e| e.to_string())?;
                let mut params = decoder.flatten_params();
                let n_dec = params.len();
                params.extend(latents.iter());
                let mut analytic = decoder.flatten_grads();
                analytic.extend(d_z.iter());
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let mut dec = Mlp::zeros(spec.clone());
                    dec.set_params(&p[..n_dec]);
                    let z = Array2::from_shape_vec((b, kdim), p[n_dec..].to_vec()).unwrap();
                    reconstruction_loss(&mut dec, &z, &obs).unwrap().0
                });
                if err > tol {
                    return Err(format!("seed {seed}: reconstruction loss rel err {err}"));
                }
            }

            // dynamics negative log likelihood through the model network
            {
                let dynamics = DynamicsModel::new(kdim, &[6], 2, false, &mut r).unwrap();
                let z = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let a = Array2::from_shape_fn((b, 2), |_| standard_normal(&mut r)).mapv(f64::tanh);
                let target = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let cache = dynamics.forward(&z, &a).map_err(|e| e.to_string())?;
                let (_, d_mean, d_sigma) = gaussian_nll(&target, &cache.mean, &cache.sigma);
                let mut dyn_mut = dynamics.clone();
                dyn_mut.net.zero_grad();
                let cache2 = dyn_mut.forward(&z, &a).unwrap();
                let (d_latent, _) = dyn_mut
                    .backward(&cache2, &d_mean, &d_sigma)
                    .map_err(|e| e.to_string())?;
                let mut params = dyn_mut.net.flatten_params();
                let n_dyn = params.len();
                params.extend(z.iter());
                let mut analytic = dyn_mut.net.flatten_grads();
                analytic.extend(d_latent.iter());
                let dyn_spec = dynamics.net.spec.clone();
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let mut dm = DynamicsModel::new(kdim, &[6], 2, false, &mut rng(0)).unwrap();
                    debug_assert_eq!(dm.net.spec.input_dim(), dyn_spec.input_dim());
                    dm.net.set_params(&p[..n_dyn]);
                    let zz = Array2::from_shape_vec((b, kdim), p[n_dyn..].to_vec()).unwrap();
                    let c = dm.forward(&zz, &a).unwrap();
                    gaussian_nll(&target, &c.mean, &c.sigma).0
                });
                if err > tol {
                    return Err(format!("seed {seed}: dynamics NLL rel err {err}"));
                }
            }

            // reward mean-squared error through the reward head
            {
                let spec = MlpSpec::new(vec![kdim, 6, 1], Activation::Identity).unwrap();
                let mut head = Mlp::init(spec.clone(), &mut r);
                let z = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let targets = Array1::from_shape_fn(b, |_| standard_normal(&mut r));
                head.zero_grad();
                let cache = head.forward(&z).unwrap();
                let mut upstream = Array2::zeros((b, 1));
                for k in 0..b {
                    upstream[[k, 0]] = 2.0 * (cache.output[[k, 0]] - targets[k]) / b as f64;
                }
                head.backward(&cache, &upstream).unwrap();
                let analytic = head.flatten_grads();
                let params = head.flatten_params();
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let mut h = Mlp::zeros(spec.clone());
                    h.set_params(p);
                    let out = h.forward(&z).unwrap().output;
                    (0..b)
                        .map(|k| (out[[k, 0]] - targets[k]).powi(2) / b as f64)
                        .sum()
                });
                if err > tol {
                    return Err(format!("seed {seed}: reward MSE rel err {err}"));
                }
            }

            // critic TD loss against fixed targets
            {
                let mut critic = Critic::new(kdim, &[6], 2, &mut r).unwrap();
                let z = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let a = Array2::from_shape_fn((b, 2), |_| standard_normal(&mut r)).mapv(f64::tanh);
                let y = Array1::from_shape_fn(b, |_| standard_normal(&mut r));
                critic.net.zero_grad();
                let cache = critic.forward(&z, &a).map_err(|e| e.to_string())?;
                let upstream =
                    Array1::from_shape_fn(b, |k| 2.0 * (cache.q[k] - y[k]) / b as f64);
                critic.backward(&cache, &upstream).unwrap();
                let analytic = critic.net.flatten_grads();
                let params = critic.net.flatten_params();
                let critic_ref = &critic;
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let mut c2 = critic_ref.clone();
                    c2.net.set_params(p);
                    let q = c2.values(&z, &a).unwrap();
                    (0..b).map(|k| (q[k] - y[k]).powi(2) / b as f64).sum()
                });
                if err > tol {
                    return Err(format!("seed {seed}: critic loss rel err {err}"));
                }
            }

            // actor loss (alpha log pi - a-weighted surrogate) with fixed noise
            {
                let actor = Actor::new(kdim, &[6], 2, &mut r).unwrap();
                let z = Array2::from_shape_fn((b, kdim), |_| standard_normal(&mut r));
                let eps = Array2::from_shape_fn((b, 2), |_| standard_normal(&mut r));
                let w = Array2::from_shape_fn((b, 2), |_| standard_normal(&mut r));
                let alpha = 0.2;
                let mut actor_mut = actor.clone();
                actor_mut.net.zero_grad();
                let cache = actor_mut.forward(&z).unwrap();
                let sample = actor_mut.sample_with_noise(&cache, eps.clone());
                // L = mean_k [ alpha logpi_k + sum_d w_kd a_kd ]
                let d_action = w.mapv(|x| x / b as f64);
                let d_logprob = Array1::from_elem(b, alpha / b as f64);
                actor_mut
                    .backward(&cache, &sample, &d_action, &d_logprob)
                    .unwrap();
                let analytic = actor_mut.net.flatten_grads();
                let params = actor_mut.net.flatten_params();
                let actor_ref = &actor;
                let err = finite_diff_relative_error(&params, &analytic, 1e-6, |p| {
                    let mut a2 = actor_ref.clone();
                    a2.net.set_params(p);
                    let c = a2.forward(&z).unwrap();
                    let s = a2.sample_with_noise(&c, eps.clone());
                    let mut loss = 0.0;
                    for k in 0..b {
                        loss += alpha * s.log_prob[k] / b as f64;
                        for d in 0..2 {
                            loss += w[[k, d]] * s.action[[k, d]] / b as f64;
                        }
                    }
                    loss
                });
                if err > tol {
                    return Err(format!("seed {seed}: actor loss rel err {err}"));
                }
            }

            // temperature loss: L(log alpha) = -exp(log alpha) (logpi + H)
            {
                let mean_logp = standard_normal(&mut r);
                let target_entropy = -2.0;
                let log_alpha = standard_normal(&mut r) * 0.3;
                let analytic = [-log_alpha.exp() * (mean_logp + target_entropy)];
                let err = finite_diff_relative_error(&[log_alpha], &analytic, 1e-6, |p| {
                    -p[0].exp() * (mean_logp + target_entropy)
                });
                if err > tol {
                    return Err(format!("seed {seed}: temperature loss rel err {err}"));
                }
            }
        }
        if t0.elapsed().as_secs_f64() >= 120.0 {
            return Err(format!("took {:.1}s, budget 120s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c07_stop_gradient_contract() {
    criterion("bitwise-zero gradients on the target branch", || {
        for seed in 0..5u64 {
            let mut r = rng(300 + seed);
            let hyper = DbcHyper {
                latent_dim: 4,
                encoder_hidden: vec![8],
                model_hidden: vec![8],
                ..DbcHyper::default()
            };
            let mut agent = DbcAgent::new(
                6,
                2,
                Algorithm::Dbc,
                hyper,
                SacHyper::default(),
                &[8],
                &mut r,
            )
            .map_err(|e| e.to_string())?;
            agent.dynamics.net.zero_grad();
            agent.reward.zero_grad();
            agent.sac.actor.net.zero_grad();
            let obs = Array2::from_shape_fn((8, 6), |_| standard_normal(&mut r));
            let perm = pair_batch(8, &mut r);
            let loss = agent.encoder_bisim_step(&obs, &perm).map_err(|e| e.to_string())?;
            if !loss.is_finite() {
                return Err("encoder loss not finite".into());
            }
            let all_zero = |g: &[f64]| g.iter().all(|&x| x == 0.0);
            if !all_zero(&agent.dynamics.net.flatten_grads()) {
                return Err(format!("seed {seed}: dynamics received gradient"));
            }
            if !all_zero(&agent.reward.flatten_grads()) {
                return Err(format!("seed {seed}: reward head received gradient"));
            }
            if !all_zero(&agent.sac.actor.net.flatten_grads()) {
                return Err(format!("seed {seed}: actor received gradient"));
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// subcommand determinism
// ---------------------------------------------------------------------------

#[test]
fn c12_subcommand_determinism() {
    criterion("byte-identical reruns of every subcommand", || {
        use std::collections::BTreeMap;
        use std::process::Command;
        let bin = env!("CARGO_BIN_EXE_bisimkit");

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = r#"
[env]
family = "grid"
side = 2
n_distractor = 2
episode_cap = 10
structure_seed = 0

[metric]
c = 0.9
gamma = 0.9

[train]
total_steps = 40
init_steps = 10
buffer_capacity = 1000
batch_size = 8
latent_dim = 3
encoder_hidden = [8]
model_hidden = [8]
sac_hidden = [8]
distance_hidden = 8
log_every = 10
eval_every = 20
eval_episodes = 1
"#;
        let cfg_path = dir.path().join("cfg.toml");
        std::fs::write(&cfg_path, cfg).map_err(|e| e.to_string())?;

        let run = |sub: &str, config: &std::path::Path, out: &std::path::Path| -> Result<(), String> {
            let o = Command::new(bin)
                .args([
                    sub,
                    "--config",
                    config.to_str().unwrap(),
                    "--seed",
                    "5",
                    "--out",
                    out.to_str().unwrap(),
                ])
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{sub} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
            Ok(())
        };
        let dir_bytes = |d: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
            std::fs::read_dir(d)
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (
                        e.file_name().to_string_lossy().into_owned(),
                        std::fs::read(e.path()).unwrap(),
                    )
                })
                .collect()
        };

        // a train run provides the checkpoint for the eval subcommands
        let ck_dir = dir.path().join("ck");
        run("train", &cfg_path, &ck_dir)?;
        let eval_cfg_path = dir.path().join("eval.toml");
        std::fs::write(
            &eval_cfg_path,
            format!(
                "checkpoint = \"{}\"\n{cfg}\n[transfer]\nvariant = \"original\"\nsteps = 30\n",
                ck_dir.join("checkpoint.json").display()
            ),
        )
        .map_err(|e| e.to_string())?;

        for (sub, config) in [
            ("exact", &cfg_path),
            ("train", &cfg_path),
            ("eval-corr", &eval_cfg_path),
            ("eval-inv", &eval_cfg_path),
            ("eval-transfer", &eval_cfg_path),
        ] {
            let o1 = dir.path().join(format!("{sub}-1"));
            let o2 = dir.path().join(format!("{sub}-2"));
            run(sub, config, &o1)?;
            run(sub, config, &o2)?;
            let a = dir_bytes(&o1);
            let b = dir_bytes(&o2);
            if a.is_empty() {
                return Err(format!("{sub} produced no output files"));
            }
            if a != b {
                return Err(format!("{sub} reruns differ"));
            }
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// trained-representation criteria (shared 50k-step grid runs)
// ---------------------------------------------------------------------------

use std::sync::OnceLock;

use bisimkit::config::{EnvSpec, ExperimentConfig, MetricConfig};
use bisimkit::envs::{Env, PointMassVariant};
use bisimkit::harness::{
    build_env, eval_correlation_report, eval_invariance_report, evaluate, training_run_probed,
    training_run_public, BuiltEnv,
};

const GRID_STEPS: usize = 50_000;
const PROBE_EVERY: usize = 2_500;
const CORR_THRESHOLD: f64 = 0.74;
const N_SEEDS: u64 = 5;

/// Calibrated configuration for the default 4x4 grid with five distractor
/// states: small bounded encoder, metric-weighted transition term, squared
/// error dynamics, and a decaying learning rate.
fn grid_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = EnvSpec::Grid {
        side: 4,
        n_distractor: 5,
        episode_cap: 50,
        structure_seed: 0,
    };
    cfg.metric = MetricConfig {
        c: 0.2,
        gamma: 0.99,
        epsilon: 0.05,
        tol: 1e-9,
    };
    let t = &mut cfg.train;
    t.total_steps = GRID_STEPS;
    t.init_steps = 500;
    t.buffer_capacity = 100_000;
    t.batch_size = 64;
    t.critic_lr = 5e-4;
    t.actor_lr = 5e-4;
    t.encoder_lr = 2e-3;
    t.model_lr = 1e-3;
    t.alpha_lr = 5e-4;
    t.latent_dim = 4;
    t.encoder_hidden = vec![64];
    t.model_hidden = vec![64];
    t.sac_hidden = vec![64];
    t.distance_hidden = 64;
    t.discount_weight = Some(0.5);
    t.mse_dynamics = true;
    t.encoder_tanh = true;
    t.lr_final_scale = 0.003;
    t.tau_phi = 0.05;
    t.eval_every = GRID_STEPS;
    t.eval_episodes = 1;
    cfg
}

struct GridRun {
    final_pearson: f64,
    /// first probe step at which the correlation threshold was reached
    crossing: Option<usize>,
    inv_ratio: f64,
}

fn train_grid(algo: Algorithm, seed: u64) -> GridRun {
    let cfg = grid_cfg();
    let mut env = build_env(&cfg.env);
    let mut r = rng(seed);
    let mut agent = DbcAgent::new(
        env.obs_dim(),
        env.action_dim(),
        algo,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut r,
    )
    .expect("agent construction");
    let mut crossing = None;
    {
        let mut probe = |step: usize, a: &DbcAgent| {
            let corr = eval_correlation_report(&cfg, a)?;
            if std::env::var("ACCEPTANCE_TRACE").is_ok() {
                println!("trace algo={algo:?} seed={seed} step={step} pstar={:.4}", corr.pearson_pistar);
            }
            if crossing.is_none() && corr.pearson_pistar >= CORR_THRESHOLD {
                crossing = Some(step);
            }
            Ok(())
        };
        training_run_probed(
            &mut agent,
            &mut env,
            &cfg,
            seed,
            GRID_STEPS,
            PROBE_EVERY,
            &mut probe,
        )
        .expect("training run");
    }
    let corr = eval_correlation_report(&cfg, &agent).expect("correlation report");
    let inv = eval_invariance_report(&cfg, &agent, seed).expect("invariance report");
    GridRun {
        final_pearson: corr.pearson_pistar,
        crossing,
        inv_ratio: inv.ratio,
    }
}

fn runs_for(algo: Algorithm, slot: &'static OnceLock<Vec<GridRun>>) -> &'static [GridRun] {
    slot.get_or_init(|| (0..N_SEEDS).map(|s| train_grid(algo, s)).collect())
}

static DBC_RUNS: OnceLock<Vec<GridRun>> = OnceLock::new();
static CASTRO_RUNS: OnceLock<Vec<GridRun>> = OnceLock::new();
static RECON_RUNS: OnceLock<Vec<GridRun>> = OnceLock::new();

fn dbc_runs() -> &'static [GridRun] {
    runs_for(Algorithm::Dbc, &DBC_RUNS)
}

#[test]
fn c08_representation_correlation() {
    criterion("trained-latent correlation with the exact metric", || {
        let t0 = Instant::now();
        let runs = dbc_runs();
        let scores: Vec<f64> = runs.iter().map(|r| r.final_pearson).collect();
        let good = scores.iter().filter(|&&p| p >= CORR_THRESHOLD).count();
        if good < 4 {
            return Err(format!(
                "only {good}/5 seeds reached pearson {CORR_THRESHOLD}: {scores:?}"
            ));
        }
        if t0.elapsed().as_secs_f64() >= 1800.0 {
            return Err(format!("took {:.0}s, budget 1800s", t0.elapsed().as_secs_f64()));
        }
        Ok(())
    });
}

#[test]
fn c09_invariance_ordering() {
    criterion("distractor/task distance ratio below reconstruction", || {
        let dbc = dbc_runs();
        let recon = runs_for(Algorithm::Reconstruction, &RECON_RUNS);
        let mut wins = 0;
        let mut detail = String::new();
        for (seed, (d, r)) in dbc.iter().zip(recon).enumerate() {
            if d.inv_ratio < r.inv_ratio {
                wins += 1;
            }
            detail.push_str(&format!(
                " seed{seed}: dbc {:.4} vs recon {:.4};",
                d.inv_ratio, r.inv_ratio
            ));
        }
        if wins < 4 {
            return Err(format!("only {wins}/5 paired seeds ordered correctly:{detail}"));
        }
        Ok(())
    });
}

#[test]
fn c11_baseline_comparison() {
    criterion("threshold reached no later than the distance-network baseline", || {
        let median_crossing = |runs: &[GridRun]| -> f64 {
            let mut xs: Vec<f64> = runs
                .iter()
                .map(|r| r.crossing.map_or(f64::INFINITY, |s| s as f64))
                .collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs[xs.len() / 2]
        };
        let dbc = median_crossing(dbc_runs());
        let castro = median_crossing(runs_for(Algorithm::Castro, &CASTRO_RUNS));
        if dbc > castro {
            return Err(format!(
                "median crossing step {dbc} (ours) vs {castro} (baseline)"
            ));
        }
        Ok(())
    });
}

// ---------------------------------------------------------------------------
// transfer on the continuous point mass
// ---------------------------------------------------------------------------

const PM_SOURCE_STEPS: usize = 20_000;
const PM_TRANSFER_STEPS: usize = 4_000;
const PM_EVAL_EPISODES: usize = 20;

fn pm_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = EnvSpec::PointMass {
        n_distractor: 32,
        episode_cap: 100,
        structure_seed: 0,
        lambda_a: 0.01,
        variant: PointMassVariant::ReachGoal,
    };
    let t = &mut cfg.train;
    t.total_steps = PM_SOURCE_STEPS;
    t.init_steps = 2000;
    t.buffer_capacity = 100_000;
    t.batch_size = 64;
    t.critic_lr = 1e-3;
    t.actor_lr = 1e-3;
    t.encoder_lr = 1e-3;
    t.model_lr = 1e-3;
    t.alpha_lr = 1e-3;
    t.latent_dim = 12;
    t.encoder_hidden = vec![64];
    t.model_hidden = vec![64];
    t.sac_hidden = vec![128, 128];
    t.distance_hidden = 64;
    t.mse_dynamics = true;
    t.encoder_tanh = false;
    t.tau_phi = 0.05;
    t.eval_every = PM_SOURCE_STEPS;
    t.eval_episodes = PM_EVAL_EPISODES;
    cfg
}

fn pm_env(cfg: &ExperimentConfig, variant: PointMassVariant) -> BuiltEnv {
    match build_env(&cfg.env) {
        BuiltEnv::PointMass(e) => BuiltEnv::PointMass(e.with_variant(variant)),
        _ => unreachable!("pm_cfg builds a point-mass env"),
    }
}

/// Mean return of uniformly random actions: the floor against which the
/// (negative) point-mass returns are normalized.
fn random_policy_return(env: &mut BuiltEnv, episodes: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut _obs = env.reset(seed.wrapping_add(ep as u64));
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

fn train_pm_source(algo: Algorithm, seed: u64) -> DbcAgent {
    let cfg = pm_cfg();
    let mut env = pm_env(&cfg, PointMassVariant::ReachGoal);
    let mut r = rng(seed);
    let mut agent = DbcAgent::new(
        env.obs_dim(),
        env.action_dim(),
        algo,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut r,
    )
    .expect("agent construction");
    training_run_public(&mut agent, &mut env, &cfg, seed, PM_SOURCE_STEPS).expect("source run");
    agent
}

/// Train a fresh SAC on hold-velocity on top of the given encoder (frozen)
/// or from scratch; returns the final deterministic evaluation return.
fn transfer_run(seed: u64, frozen_from: Option<&DbcAgent>) -> f64 {
    let mut cfg = pm_cfg();
    cfg.train.total_steps = PM_TRANSFER_STEPS;
    cfg.train.init_steps = 500;
    cfg.train.critic_lr = 3e-3;
    cfg.train.actor_lr = 3e-3;
    cfg.train.alpha_lr = 3e-3;
    cfg.train.encoder_lr = 3e-3;
    let mut env = pm_env(&cfg, PointMassVariant::HoldVelocity);
    if frozen_from.is_some() {
        cfg.train.encoder_lr = 0.0;
    }
    let init_seed = if frozen_from.is_some() { seed } else { seed ^ 0xa5a5_a5a5 };
    let mut r = rng(init_seed);
    let mut agent = DbcAgent::new(
        env.obs_dim(),
        env.action_dim(),
        Algorithm::SacRaw,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut r,
    )
    .expect("agent construction");
    if let Some(src) = frozen_from {
        agent.encoder.net = src.encoder.net.clone();
        // Standardize latent features over target-task observations so the
        // fresh critic/actor see inputs at a uniform scale (the encoder
        // output activation is linear, so this folds into the last layer).
        let mut probe = pm_env(&cfg, PointMassVariant::HoldVelocity);
        let mut pr = rng(seed ^ 0x77aa);
        let mut obs_rows: Vec<f64> = Vec::new();
        let mut n_rows = 0usize;
        let mut o = probe.reset(seed ^ 0x77aa);
        for _ in 0..2000 {
            obs_rows.extend_from_slice(&o);
            n_rows += 1;
            let a: Vec<f64> =
                (0..probe.action_dim()).map(|_| pr.random_range(-1.0..1.0)).collect();
            let tr = probe.step(&a).unwrap();
            o = if tr.truncated || tr.done {
                probe.reset(seed ^ 0x77aa ^ n_rows as u64)
            } else {
                tr.obs
            };
        }
        let obs = Array2::from_shape_vec((n_rows, agent.encoder.net.spec.input_dim()), obs_rows)
            .unwrap();
        let z = agent.encoder.encode_values(&obs).unwrap();
        let mean = z.mean_axis(ndarray::Axis(0)).unwrap();
        let stds: Vec<f64> = (0..z.ncols())
            .map(|j| {
                let col = z.column(j);
                (col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n_rows as f64).sqrt()
            })
            .collect();
        let scale: Vec<f64> = stds.iter().map(|s| 1.0 / s.max(1e-4)).collect();
        agent.encoder.net.standardize_output(mean.as_slice().unwrap(), &scale);
        agent.encoder.target = agent.encoder.net.clone();
    }
    training_run_public(&mut agent, &mut env, &cfg, seed, PM_TRANSFER_STEPS).expect("transfer run")
}

#[test]
fn c10_transfer_and_distractor_swap() {
    criterion("frozen-encoder transfer and distractor-shift robustness", || {
        let cfg = pm_cfg();
        let mut wins = 0;
        let mut detail = String::new();
        let mut dbc_drops = Vec::new();
        let mut recon_drops = Vec::new();
        for seed in 0..N_SEEDS {
            let dbc_src = train_pm_source(Algorithm::Dbc, seed);
            let recon_src = train_pm_source(Algorithm::Reconstruction, seed);

            // frozen-encoder fine-tuning vs from-scratch at the same budget
            let frozen = transfer_run(seed, Some(&dbc_src));
            let scratch = transfer_run(seed, None);
            let mut hv = pm_env(&cfg, PointMassVariant::HoldVelocity);
            let floor = random_policy_return(&mut hv, PM_EVAL_EPISODES, seed ^ 0x0f0f);
            // returns are negative; normalize against the random-action floor
            let ok = if scratch > floor {
                (frozen - floor) / (scratch - floor) >= 0.7
            } else {
                frozen >= scratch
            };
            if ok {
                wins += 1;
            }
            detail.push_str(&format!(
                " seed{seed}: frozen {frozen:.2} scratch {scratch:.2} floor {floor:.2};"
            ));

            // evaluation-time distractor-distribution swap on the source task
            let mut orig = pm_env(&cfg, PointMassVariant::ReachGoal);
            let mut swapped = pm_env(&cfg, PointMassVariant::ReachGoal);
            if let BuiltEnv::PointMass(e) = &mut swapped {
                e.set_distractor_params(0.99, 0.9);
            }
            let eval_seed = seed ^ 0x5aa5;
            let dbc_orig = evaluate(&dbc_src, &mut orig, PM_EVAL_EPISODES, eval_seed)
                .map_err(|e| e.to_string())?;
            let dbc_swap = evaluate(&dbc_src, &mut swapped, PM_EVAL_EPISODES, eval_seed)
                .map_err(|e| e.to_string())?;
            let rec_orig = evaluate(&recon_src, &mut orig, PM_EVAL_EPISODES, eval_seed)
                .map_err(|e| e.to_string())?;
            let rec_swap = evaluate(&recon_src, &mut swapped, PM_EVAL_EPISODES, eval_seed)
                .map_err(|e| e.to_string())?;
            dbc_drops.push(dbc_orig - dbc_swap);
            recon_drops.push(rec_orig - rec_swap);
        }
        if wins < 4 {
            return Err(format!("only {wins}/5 transfer seeds reached 70%:{detail}"));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (d, r) = (mean(&dbc_drops), mean(&recon_drops));
        if d >= r {
            return Err(format!(
                "swap drop {d:.3} (ours) not smaller than {r:.3} (reconstruction)"
            ));
        }
        Ok(())
    });
}
